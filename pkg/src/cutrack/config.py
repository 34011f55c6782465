"""Run configuration: a single JSON document, validated before any work.

Unknown keys are rejected with their full path. The CUTRACK_SEED environment
variable overrides the seed key. Scale-factor defaults are alpha=1.0 and
beta=0.4.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .datasets import DEFAULT_CATEGORIES, CategoryTemplate, SynthConfig
from .encoder import BlockConfig, EncoderConfig
from .trackers import Ablation, TrackSettings, TrainConfig

SEED_ENV_VAR = "CUTRACK_SEED"


class ConfigError(ValueError):
    """Invalid configuration; `path` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _expect(value, path: str, kinds, message: str):
    if not isinstance(value, kinds):
        raise ConfigError(path, message)
    return value


def _number(obj: dict, key: str, path: str, default):
    value = obj.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {value!r}")
    return float(value)


def _integer(obj: dict, key: str, path: str, default):
    value = obj.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {value!r}")
    return int(value)


def _boolean(obj: dict, key: str, path: str, default):
    value = obj.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"{path}.{key}", f"expected true/false, got {value!r}")
    return value


def _check_keys(obj: dict, path: str, allowed: set[str]):
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown key")


_DEFAULT_STAGES = [
    {"samples": 128, "out_dim": 32, "k": 16, "r": 0.3},
    {"samples": 64, "out_dim": 64, "k": 16, "r": 0.6},
    {"samples": 32, "out_dim": 128, "k": 16, "r": 1.2},
]


class RunConfig:
    """Validated, fully-defaulted run description."""

    def __init__(self, raw: dict, path: str = "config"):
        _expect(raw, path, dict, "config must be a JSON object")
        _check_keys(
            raw,
            path,
            {
                "seed",
                "paradigm",
                "alpha",
                "beta",
                "n_template",
                "n_search",
                "fixed_margin_m",
                "fixed_label_radius_m",
                "head_hidden",
                "seg_threshold",
                "ablation",
                "encoder",
                "train",
                "synth",
                "eval_synth",
            },
        )
        self.seed = _integer(raw, "seed", path, 0)
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            try:
                self.seed = int(env_seed)
            except ValueError:
                raise ConfigError(path + ".seed", f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}")
        self.paradigm = raw.get("paradigm", "motion")
        if self.paradigm not in ("siamese", "motion"):
            raise ConfigError(f"{path}.paradigm", f"expected 'siamese' or 'motion', got {self.paradigm!r}")
        self.alpha = _number(raw, "alpha", path, 1.0)
        self.beta = _number(raw, "beta", path, 0.4)
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError(f"{path}.alpha", "alpha and beta must be positive")
        self.n_template = _integer(raw, "n_template", path, 128)
        self.n_search = _integer(raw, "n_search", path, 256)
        self.fixed_margin_m = _number(raw, "fixed_margin_m", path, 2.0)
        self.fixed_label_radius_m = _number(raw, "fixed_label_radius_m", path, 0.6)
        self.head_hidden = _integer(raw, "head_hidden", path, 64)
        self.seg_threshold = _number(raw, "seg_threshold", path, 0.5)

        ab = raw.get("ablation", {})
        _expect(ab, f"{path}.ablation", dict, "expected an object")
        _check_keys(ab, f"{path}.ablation", {"adaformer", "unified_inputs", "unified_objective"})
        self.ablation = Ablation(
            adaformer=_boolean(ab, "adaformer", f"{path}.ablation", True),
            unified_inputs=_boolean(ab, "unified_inputs", f"{path}.ablation", True),
            unified_objective=_boolean(ab, "unified_objective", f"{path}.ablation", True),
        )

        enc = raw.get("encoder", {})
        _expect(enc, f"{path}.encoder", dict, "expected an object")
        _check_keys(enc, f"{path}.encoder", {"pos_hidden", "stages"})
        self.pos_hidden = _integer(enc, "pos_hidden", f"{path}.encoder", 32)
        stages_raw = enc.get("stages", _DEFAULT_STAGES)
        _expect(stages_raw, f"{path}.encoder.stages", list, "expected a list")
        in_dim = 3 if self.paradigm == "siamese" else 5
        stages = []
        prev = in_dim
        for i, st in enumerate(stages_raw):
            spath = f"{path}.encoder.stages[{i}]"
            _expect(st, spath, dict, "expected an object")
            _check_keys(st, spath, {"samples", "out_dim", "k", "r"})
            for required in ("samples", "out_dim"):
                if required not in st:
                    raise ConfigError(f"{spath}.{required}", "required key missing")
            samples = _integer(st, "samples", spath, 0)
            out_dim = _integer(st, "out_dim", spath, 0)
            k = _integer(st, "k", spath, 16)
            r = _number(st, "r", spath, 0.3 * 2**i)
            try:
                stages.append((samples, BlockConfig(prev, out_dim, k, r)))
            except ValueError as e:
                raise ConfigError(spath, str(e)) from None
            prev = out_dim
        try:
            self.encoder = EncoderConfig(tuple(stages), pos_hidden=self.pos_hidden)
        except ValueError as e:
            raise ConfigError(f"{path}.encoder.stages", str(e)) from None

        tr = raw.get("train", {})
        _expect(tr, f"{path}.train", dict, "expected an object")
        _check_keys(
            tr,
            f"{path}.train",
            {
                "lr",
                "batch_size",
                "steps",
                "lambda_cls",
                "lambda_off",
                "lambda_ang",
                "jitter_xy",
                "jitter_z",
                "jitter_yaw",
            },
        )
        try:
            self.train = TrainConfig(
                lr=_number(tr, "lr", f"{path}.train", 3e-3),
                batch_size=_integer(tr, "batch_size", f"{path}.train", 8),
                steps=_integer(tr, "steps", f"{path}.train", 400),
                lambda_cls=_number(tr, "lambda_cls", f"{path}.train", 1.0),
                lambda_off=_number(tr, "lambda_off", f"{path}.train", 1.0),
                lambda_ang=_number(tr, "lambda_ang", f"{path}.train", 1.0),
                seed=self.seed,
                paradigm=self.paradigm,
                jitter_xy=_number(tr, "jitter_xy", f"{path}.train", 0.08),
                jitter_z=_number(tr, "jitter_z", f"{path}.train", 0.02),
                jitter_yaw=_number(tr, "jitter_yaw", f"{path}.train", 0.02),
            )
        except ValueError as e:
            raise ConfigError(f"{path}.train", str(e)) from None

        self.synth = self._parse_synth(raw.get("synth", {}), f"{path}.synth", self.seed)
        eval_defaults = {"n_sequences": 10, "seed": self.seed + 1}
        eval_raw = dict(eval_defaults)
        eval_raw.update(raw.get("eval_synth", {}))
        self.eval_synth = self._parse_synth(eval_raw, f"{path}.eval_synth", self.seed + 1)

    @staticmethod
    def _parse_synth(obj: dict, path: str, default_seed: int) -> SynthConfig:
        _expect(obj, path, dict, "expected an object")
        _check_keys(
            obj,
            path,
            {
                "n_sequences",
                "frames_per_sequence",
                "surface_density",
                "interior_fraction",
                "point_jitter",
                "motion_noise",
                "yaw_noise",
                "distractor_probs",
                "distractor_min_dist",
                "distractor_max_dist",
                "background_density",
                "background_margin",
                "dropout",
                "max_points_per_object",
                "seed",
                "categories",
            },
        )
        cats = dict(DEFAULT_CATEGORIES)
        if "categories" in obj:
            _expect(obj["categories"], f"{path}.categories", dict, "expected an object")
            cats = {}
            for name, c in obj["categories"].items():
                cpath = f"{path}.categories.{name}"
                _expect(c, cpath, dict, "expected an object")
                _check_keys(
                    c,
                    cpath,
                    {"extent_mean", "extent_std", "speed_mean", "speed_std", "yaw_rate_std", "shape"},
                )
                try:
                    cats[name] = CategoryTemplate(
                        tuple(float(v) for v in c["extent_mean"]),
                        tuple(float(v) for v in c["extent_std"]),
                        float(c["speed_mean"]),
                        float(c["speed_std"]),
                        float(c["yaw_rate_std"]),
                        c.get("shape", "box"),
                    )
                except (KeyError, TypeError, ValueError) as e:
                    raise ConfigError(cpath, f"invalid category template: {e}") from None
        probs = obj.get("distractor_probs", (0.35, 0.35, 0.2, 0.1))
        try:
            return SynthConfig(
                categories=cats,
                n_sequences=_integer(obj, "n_sequences", path, 10),
                frames_per_sequence=_integer(obj, "frames_per_sequence", path, 20),
                surface_density=_number(obj, "surface_density", path, 14.0),
                interior_fraction=_number(obj, "interior_fraction", path, 0.5),
                point_jitter=_number(obj, "point_jitter", path, 0.02),
                motion_noise=_number(obj, "motion_noise", path, 0.02),
                yaw_noise=_number(obj, "yaw_noise", path, 0.005),
                distractor_probs=tuple(float(p) for p in probs),
                distractor_min_dist=_number(obj, "distractor_min_dist", path, 1.6),
                distractor_max_dist=_number(obj, "distractor_max_dist", path, 5.0),
                background_density=_number(obj, "background_density", path, 0.8),
                background_margin=_number(obj, "background_margin", path, 8.0),
                dropout=_number(obj, "dropout", path, 0.1),
                max_points_per_object=_integer(obj, "max_points_per_object", path, 220),
                seed=_integer(obj, "seed", path, default_seed),
            )
        except ValueError as e:
            raise ConfigError(path, str(e)) from None

    @property
    def settings(self) -> TrackSettings:
        return TrackSettings(
            alpha=self.alpha,
            beta=self.beta,
            n_template=self.n_template,
            n_search=self.n_search,
            fixed_margin_m=self.fixed_margin_m,
            fixed_label_radius_m=self.fixed_label_radius_m,
            ablation=self.ablation,
        )

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError("config", f"invalid JSON: {e}") from None
        return cls(raw)
