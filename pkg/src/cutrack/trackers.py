"""Siamese and motion-centric tracking heads, losses, training, OPE loop.

Both heads follow the same skeleton: encode points with the shared
deformable-attention encoder, then read out per-seed scores and offsets
(Siamese) or a per-point segmentation plus one global motion vector
(motion-centric). Offsets are learned normalized by the target's per-axis
extents and denormalized on the way out; the unnormalized variant is kept
behind the unified-objective ablation switch.

Input point rows are sorted lexicographically before encoding, so both
forwards are exactly invariant to input point order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Adam, MLP, Parameter, Tensor
from .encoder import BlockConfig, DeformableEncoder, EncoderConfig, default_encoder_config
from .geometry import BBox3D, PointCloud, canonical_to_world, wrap_angle, world_to_canonical
from .datasets import Sequence
from .model_io import load_model, save_model
from .unify import (
    RegionSpec,
    center_distance_labels,
    denormalize_offset,
    make_fixed_margin_region,
    make_search_region,
    normalize_offset,
    sample_region_points,
    shape_aware_labels,
)

THETA_BOUND = math.pi / 4.0  # inter-frame rotation is regressed through tanh times this


@dataclass(frozen=True)
class Ablation:
    """Unified-component switches (all on = the full model)."""

    adaformer: bool = True
    unified_inputs: bool = True
    unified_objective: bool = True


@dataclass(frozen=True)
class TrackSettings:
    """Run-level knobs shared by training and tracking."""

    alpha: float = 1.0
    beta: float = 0.4
    n_template: int = 128
    n_search: int = 256
    fixed_margin_m: float = 2.0
    fixed_label_radius_m: float = 0.6
    ablation: Ablation = field(default_factory=Ablation)


@dataclass(frozen=True)
class SiameseHeadConfig:
    encoder: EncoderConfig
    head_hidden: int = 64


@dataclass(frozen=True)
class MotionHeadConfig:
    encoder: EncoderConfig
    head_hidden: int = 64
    seg_threshold: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    batch_size: int = 8
    steps: int = 400
    lambda_cls: float = 1.0
    lambda_off: float = 1.0
    lambda_ang: float = 1.0
    seed: int = 0
    paradigm: str = "motion"
    jitter_xy: float = 0.08
    jitter_z: float = 0.02
    jitter_yaw: float = 0.02

    def __post_init__(self):
        if self.lr < 0.0 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("train config needs lr >= 0, steps >= 1, batch_size >= 1")
        if self.paradigm not in ("siamese", "motion"):
            raise ValueError(f"unknown paradigm {self.paradigm!r}")


@dataclass(frozen=True)
class Proposal:
    x: float
    y: float
    z: float
    theta: float
    score: float


def select_best_proposal(proposals: list[Proposal]) -> Proposal:
    """Highest score wins; ties go to the lowest index."""
    if not proposals:
        raise ValueError("no proposals to select from")
    best = 0
    for i, p in enumerate(proposals):
        if p.score > proposals[best].score:
            best = i
    return proposals[best]


def _sort_rows(rows: np.ndarray) -> np.ndarray:
    order = np.lexsort(tuple(rows[:, c] for c in range(rows.shape[1] - 1, -1, -1)))
    return rows[order]


class SiameseOutput(NamedTuple):
    proposals: list[Proposal]
    seed_xyz: np.ndarray  # (m, 3) region-canonical coordinates of the seeds
    norm_offsets: Tensor  # (m, 3) offsets in the learned (normalized) space
    theta: Tensor  # (m, 1) bounded rotation offsets, radians
    score_logits: Tensor  # (m, 1)


class MotionOutput(NamedTuple):
    seg_logits: Tensor  # (m, 1)
    seed_xyz: np.ndarray  # (m, 3)
    seed_tags: np.ndarray  # (m,) 0 = previous frame, 1 = current frame
    norm_motion: Tensor  # (3,)
    dtheta: Tensor  # (1,) bounded, radians
    pool_fallback: bool  # True when no seed cleared the segmentation threshold


class _TrackerBase:
    paradigm = ""

    def __init__(self, settings: TrackSettings, init_seed: int):
        self.settings = settings
        self.init_seed = init_seed

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError

    def _axis_extents(self, box: BBox3D) -> np.ndarray:
        return box.axis_extents

    def _denorm(self, learned: np.ndarray, axis_extents: np.ndarray) -> np.ndarray:
        if self.settings.ablation.unified_objective:
            return denormalize_offset(learned, axis_extents)
        return np.asarray(learned, dtype=np.float64)

    def offset_target(self, delta: np.ndarray, axis_extents: np.ndarray) -> np.ndarray:
        if self.settings.ablation.unified_objective:
            return normalize_offset(delta, axis_extents)
        return np.asarray(delta, dtype=np.float64)

    def point_labels(self, points_canonical: np.ndarray, extents_whl) -> np.ndarray:
        if self.settings.ablation.unified_objective:
            return shape_aware_labels(points_canonical, extents_whl, self.settings.beta)
        return center_distance_labels(points_canonical, self.settings.fixed_label_radius_m)

    def make_region(self, prev_box: BBox3D) -> RegionSpec:
        if self.settings.ablation.unified_inputs:
            return make_search_region(prev_box, self.settings.alpha)
        return make_fixed_margin_region(prev_box, self.settings.fixed_margin_m)

    def config_dict(self) -> dict:
        enc = self.encoder.cfg
        return {
            "paradigm": self.paradigm,
            "init_seed": self.init_seed,
            "head_hidden": self.head_hidden,
            "seg_threshold": getattr(self, "seg_threshold", None),
            "settings": {
                "alpha": self.settings.alpha,
                "beta": self.settings.beta,
                "n_template": self.settings.n_template,
                "n_search": self.settings.n_search,
                "fixed_margin_m": self.settings.fixed_margin_m,
                "fixed_label_radius_m": self.settings.fixed_label_radius_m,
                "ablation": {
                    "adaformer": self.settings.ablation.adaformer,
                    "unified_inputs": self.settings.ablation.unified_inputs,
                    "unified_objective": self.settings.ablation.unified_objective,
                },
            },
            "encoder": {
                "pos_hidden": enc.pos_hidden,
                "stages": [
                    {"samples": m, "in_dim": bc.in_dim, "out_dim": bc.out_dim, "k": bc.k, "r": bc.r}
                    for m, bc in enc.stages
                ],
            },
        }

    def save(self, path: str):
        save_model(path, self.parameters(), self.config_dict())

    def zero_parameters(self):
        for p in self.parameters():
            p.data[...] = 0.0


def _encoder_from_config(cfg: dict) -> EncoderConfig:
    stages = tuple(
        (s["samples"], BlockConfig(s["in_dim"], s["out_dim"], s["k"], s["r"]))
        for s in cfg["stages"]
    )
    return EncoderConfig(stages, pos_hidden=cfg["pos_hidden"])


def _settings_from_config(cfg: dict) -> TrackSettings:
    ab = cfg["ablation"]
    return TrackSettings(
        alpha=cfg["alpha"],
        beta=cfg["beta"],
        n_template=cfg["n_template"],
        n_search=cfg["n_search"],
        fixed_margin_m=cfg["fixed_margin_m"],
        fixed_label_radius_m=cfg["fixed_label_radius_m"],
        ablation=Ablation(ab["adaformer"], ab["unified_inputs"], ab["unified_objective"]),
    )


class SiameseTracker(_TrackerBase):
    """Template/search matching head: per-seed score, offset and rotation."""

    paradigm = "siamese"

    def __init__(self, head_cfg: SiameseHeadConfig, settings: TrackSettings, seed: int = 0):
        super().__init__(settings, seed)
        if head_cfg.encoder.in_dim != 3:
            raise ValueError("siamese encoder must take 3 input channels (xyz)")
        rng = np.random.default_rng(seed)
        self.head_hidden = head_cfg.head_hidden
        self.encoder = DeformableEncoder(head_cfg.encoder, rng, name="encoder")
        self.encoder.set_deform_enabled(settings.ablation.adaformer)
        d = head_cfg.encoder.out_dim
        self.head = MLP([2 * d, head_cfg.head_hidden, 5], rng, "head", zero_last=False)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.head.parameters()

    def forward(self, template: PointCloud, template_box: BBox3D, search: PointCloud) -> SiameseOutput:
        t_pts = _sort_rows(template.points)
        s_pts = _sort_rows(search.points)
        t_res = self.encoder.forward(t_pts, Tensor(t_pts))
        s_res = self.encoder.forward(s_pts, Tensor(s_pts))
        d = t_res.feats.data.shape[1]
        m = s_res.feats.data.shape[0]
        pooled = ag.reshape(ag.mean(t_res.feats, axis=0), (1, d))
        tiled = ag.broadcast_add(Tensor(np.zeros((m, d))), pooled)
        out = self.head(ag.concat([s_res.feats, tiled], axis=1))
        norm_off = ag.slice_last(out, 0, 3)
        theta = ag.scale(ag.tanh(ag.slice_last(out, 3, 4)), THETA_BOUND)
        logits = ag.slice_last(out, 4, 5)

        seeds = s_res.points
        deltas = self._denorm(norm_off.data, self._axis_extents(template_box))
        scores = 1.0 / (1.0 + np.exp(-logits.data[:, 0]))
        proposals = [
            Proposal(
                seeds[i, 0] + deltas[i, 0],
                seeds[i, 1] + deltas[i, 1],
                seeds[i, 2] + deltas[i, 2],
                float(theta.data[i, 0]),
                float(scores[i]),
            )
            for i in range(m)
        ]
        return SiameseOutput(proposals, seeds, norm_off, theta, logits)

    @classmethod
    def _from_config(cls, cfg: dict) -> "SiameseTracker":
        head = SiameseHeadConfig(_encoder_from_config(cfg["encoder"]), cfg["head_hidden"])
        return cls(head, _settings_from_config(cfg["settings"]), seed=cfg["init_seed"])

    def track_step(self, prev_box: BBox3D, template: PointCloud, frame: PointCloud, rng) -> tuple[BBox3D | None, dict]:
        region = self.make_region(prev_box)
        sampled = sample_region_points(frame, region, self.settings.n_search, rng)
        if sampled.empty:
            return None, {"empty": True}
        out = self.forward(template, prev_box, sampled.points)
        best = select_best_proposal(out.proposals)
        center = canonical_to_world(np.array([best.x, best.y, best.z]), region.box)
        yaw = wrap_angle(region.box.yaw + best.theta)
        return BBox3D(center, prev_box.w, prev_box.h, prev_box.l, yaw), {"empty": False}


class MotionTracker(_TrackerBase):
    """Two-frame relative-motion head with foreground segmentation."""

    paradigm = "motion"

    def __init__(self, head_cfg: MotionHeadConfig, settings: TrackSettings, seed: int = 0):
        super().__init__(settings, seed)
        if head_cfg.encoder.in_dim != 5:
            raise ValueError("motion encoder must take 5 input channels (xyz, prior mask, frame tag)")
        rng = np.random.default_rng(seed)
        self.head_hidden = head_cfg.head_hidden
        self.seg_threshold = head_cfg.seg_threshold
        self.encoder = DeformableEncoder(head_cfg.encoder, rng, name="encoder")
        self.encoder.set_deform_enabled(settings.ablation.adaformer)
        d = head_cfg.encoder.out_dim
        self.seg_head = MLP([d, head_cfg.head_hidden, 1], rng, "seg")
        self.motion_head = MLP([2 * d, head_cfg.head_hidden, 4], rng, "motion")

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.seg_head.parameters() + self.motion_head.parameters()

    def forward(self, prev: PointCloud, prev_mask: np.ndarray, cur: PointCloud) -> MotionOutput:
        prev_rows = np.column_stack(
            [prev.points, np.asarray(prev_mask, dtype=np.float64), np.zeros(len(prev))]
        )
        cur_rows = np.column_stack([cur.points, np.zeros(len(cur)), np.ones(len(cur))])
        rows = _sort_rows(np.vstack([prev_rows, cur_rows]))
        res = self.encoder.forward(rows[:, :3], Tensor(rows))
        seg_logits = self.seg_head(res.feats)

        # pool predicted-foreground features separately per frame so the
        # motion readout sees both frames' target summaries side by side
        seed_tags = rows[res.indices][:, 4]
        foreground = 1.0 / (1.0 + np.exp(-seg_logits.data[:, 0])) > self.seg_threshold
        fallback = False
        pools = []
        for tag in (0.0, 1.0):
            in_frame = seed_tags == tag
            selected = np.flatnonzero(foreground & in_frame)
            if selected.size == 0:
                fallback = True
                selected = np.flatnonzero(in_frame)
            if selected.size == 0:
                selected = np.arange(seed_tags.size)
            pools.append(ag.mean(ag.gather_rows(res.feats, selected), axis=0))
        pooled = ag.concat(pools, axis=0)
        out = self.motion_head(ag.reshape(pooled, (1, pooled.data.shape[0])))
        norm_motion = ag.reshape(ag.slice_last(out, 0, 3), (3,))
        dtheta = ag.reshape(ag.scale(ag.tanh(ag.slice_last(out, 3, 4)), THETA_BOUND), (1,))
        seed_rows = rows[res.indices]
        return MotionOutput(seg_logits, seed_rows[:, :3], seed_rows[:, 4], norm_motion, dtheta, fallback)

    @classmethod
    def _from_config(cls, cfg: dict) -> "MotionTracker":
        head = MotionHeadConfig(
            _encoder_from_config(cfg["encoder"]), cfg["head_hidden"], cfg["seg_threshold"]
        )
        return cls(head, _settings_from_config(cfg["settings"]), seed=cfg["init_seed"])

    def track_step(
        self, prev_box: BBox3D, prev_frame: PointCloud, cur_frame: PointCloud, rng
    ) -> tuple[BBox3D | None, dict]:
        region = self.make_region(prev_box)
        prev_sample = sample_region_points(prev_frame, region, self.settings.n_template, rng)
        cur_sample = sample_region_points(cur_frame, region, self.settings.n_search, rng)
        if cur_sample.empty:
            return None, {"empty": True}
        # region shares the previous box's center/yaw, so the prior box is
        # axis-aligned at the canonical origin
        local = prev_sample.points.points
        prev_mask = (
            (np.abs(local[:, 0]) <= prev_box.l / 2.0)
            & (np.abs(local[:, 1]) <= prev_box.w / 2.0)
            & (np.abs(local[:, 2]) <= prev_box.h / 2.0)
        ).astype(np.float64)
        out = self.forward(prev_sample.points, prev_mask, cur_sample.points)
        delta = self._denorm(out.norm_motion.data, self._axis_extents(prev_box))
        center = canonical_to_world(delta, region.box)
        yaw = wrap_angle(prev_box.yaw + float(out.dtheta.data[0]))
        return (
            BBox3D(center, prev_box.w, prev_box.h, prev_box.l, yaw),
            {"empty": False, "seg_fallback": out.pool_fallback},
        )


def siamese_forward(model: SiameseTracker, template: PointCloud, template_box: BBox3D, search: PointCloud) -> SiameseOutput:
    return model.forward(template, template_box, search)


def motion_forward(model: MotionTracker, prev: PointCloud, prev_mask: np.ndarray, cur: PointCloud) -> MotionOutput:
    return model.forward(prev, prev_mask, cur)


def build_tracker(paradigm: str, encoder_cfg: EncoderConfig | None, settings: TrackSettings, head_hidden: int = 64, seg_threshold: float = 0.5, seed: int = 0):
    if paradigm == "siamese":
        enc = encoder_cfg or default_encoder_config(in_dim=3)
        return SiameseTracker(SiameseHeadConfig(enc, head_hidden), settings, seed)
    if paradigm == "motion":
        enc = encoder_cfg or default_encoder_config(in_dim=5)
        return MotionTracker(MotionHeadConfig(enc, head_hidden, seg_threshold), settings, seed)
    raise ValueError(f"unknown paradigm {paradigm!r}")


def load_tracker(path: str):
    cfg, tensors = load_model(path)
    if cfg["paradigm"] == "siamese":
        model = SiameseTracker._from_config(cfg)
    elif cfg["paradigm"] == "motion":
        model = MotionTracker._from_config(cfg)
    else:
        raise ValueError(f"unknown paradigm {cfg['paradigm']!r} in model file")
    params = {p.name: p for p in model.parameters()}
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise ValueError(f"model file parameters do not match architecture: {missing[:4]}")
    for name, arr in tensors.items():
        if params[name].data.shape != arr.shape:
            raise ValueError(f"shape mismatch for {name}: {params[name].data.shape} vs {arr.shape}")
        params[name].data = arr.copy()
    return model


# ---------------------------------------------------------------------------
# Training samples and losses


@dataclass(frozen=True)
class SiameseSample:
    template_points: PointCloud  # template-box canonical
    search_points: PointCloud  # region canonical
    gt_box_region: BBox3D  # current-frame target box, region frame
    axis_extents: np.ndarray
    extents_whl: tuple[float, float, float]
    theta_target: float


@dataclass(frozen=True)
class MotionSample:
    prev_points: PointCloud  # region canonical
    prev_mask: np.ndarray
    cur_points: PointCloud  # region canonical
    gt_prev_region: BBox3D
    gt_cur_region: BBox3D
    axis_extents: np.ndarray
    extents_whl: tuple[float, float, float]
    motion_target: np.ndarray  # current target center in the region frame
    theta_target: float


def _box_in_region(box: BBox3D, region: RegionSpec) -> BBox3D:
    center = world_to_canonical(box.center, region.box)
    return BBox3D(center, box.w, box.h, box.l, wrap_angle(box.yaw - region.box.yaw))


def _jitter_box(box: BBox3D, cfg: TrainConfig, rng: np.random.Generator) -> BBox3D:
    shift = np.array(
        [rng.normal(0.0, cfg.jitter_xy), rng.normal(0.0, cfg.jitter_xy), rng.normal(0.0, cfg.jitter_z)]
    )
    return BBox3D(box.center + shift, box.w, box.h, box.l, wrap_angle(box.yaw + rng.normal(0.0, cfg.jitter_yaw)))


def build_training_samples(
    sequences: list[Sequence], model: _TrackerBase, cfg: TrainConfig, rng: np.random.Generator
):
    """One sample per consecutive frame pair of every sequence."""
    samples = []
    st = model.settings
    for seq in sequences:
        boxes = seq.target_boxes()
        for i in range(1, len(seq.frames)):
            gt_prev, gt_cur = boxes[i - 1], boxes[i]
            anchor = _jitter_box(gt_prev, cfg, rng)
            region = model.make_region(anchor)
            extents_whl = (gt_prev.w, gt_prev.h, gt_prev.l)
            axis_extents = gt_prev.axis_extents
            if cfg.paradigm == "siamese":
                tpl = sample_region_points(seq.frames[i - 1].cloud, RegionSpec(gt_prev), st.n_template, rng)
                search = sample_region_points(seq.frames[i].cloud, region, st.n_search, rng)
                if tpl.empty or search.empty:
                    continue
                gt_region = _box_in_region(gt_cur, region)
                samples.append(
                    SiameseSample(
                        tpl.points,
                        search.points,
                        gt_region,
                        axis_extents,
                        extents_whl,
                        gt_region.yaw,
                    )
                )
            else:
                prev_s = sample_region_points(seq.frames[i - 1].cloud, region, st.n_template, rng)
                cur_s = sample_region_points(seq.frames[i].cloud, region, st.n_search, rng)
                if cur_s.empty:
                    continue
                local = prev_s.points.points
                prev_mask = (
                    (np.abs(local[:, 0]) <= anchor.l / 2.0)
                    & (np.abs(local[:, 1]) <= anchor.w / 2.0)
                    & (np.abs(local[:, 2]) <= anchor.h / 2.0)
                ).astype(np.float64)
                gt_prev_region = _box_in_region(gt_prev, region)
                gt_cur_region = _box_in_region(gt_cur, region)
                samples.append(
                    MotionSample(
                        prev_s.points,
                        prev_mask,
                        cur_s.points,
                        gt_prev_region,
                        gt_cur_region,
                        axis_extents,
                        extents_whl,
                        gt_cur_region.center.copy(),
                        wrap_angle(gt_cur.yaw - region.box.yaw),
                    )
                )
    if not samples:
        raise ValueError("no usable training samples (all crops empty)")
    return samples


def _bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(logits.data.shape))
    return ag.mean(ag.sub(ag.softplus(logits), ag.hadamard(logits, y)))


def loss_total(model: _TrackerBase, output, sample, cfg: TrainConfig) -> tuple[Tensor, dict]:
    """Weighted sum of classification, offset and angle terms.

    Offset and angle terms apply to positive seeds only for the Siamese
    head; the motion head's global motion vector is always supervised. The
    diagnostic dict flags batches without positive samples.
    """
    flags = {"no_positives": False}
    if isinstance(output, SiameseOutput):
        seeds_gt = world_to_canonical(output.seed_xyz, sample.gt_box_region)
        labels = model.point_labels(seeds_gt, sample.extents_whl)
        cls = _bce_with_logits(output.score_logits, labels)
        pos = np.flatnonzero(labels == 1)
        if pos.size == 0:
            flags["no_positives"] = True
            zero = Tensor(0.0)
            off_term, ang_term = zero, zero
        else:
            deltas = sample.gt_box_region.center[None, :] - output.seed_xyz[pos]
            targets = np.stack([model.offset_target(d, sample.axis_extents) for d in deltas])
            off_pred = ag.gather_rows(output.norm_offsets, pos)
            off_term = ag.mean(ag.huber(ag.sub(off_pred, Tensor(targets))))
            ang_pred = ag.gather_rows(output.theta, pos)
            ang_t = Tensor(np.full((pos.size, 1), sample.theta_target))
            ang_term = ag.mean(ag.huber(ag.sub(ang_pred, ang_t)))
    elif isinstance(output, MotionOutput):
        prev_seeds = output.seed_tags == 0.0
        labels = np.where(
            prev_seeds,
            model.point_labels(world_to_canonical(output.seed_xyz, sample.gt_prev_region), sample.extents_whl),
            model.point_labels(world_to_canonical(output.seed_xyz, sample.gt_cur_region), sample.extents_whl),
        )
        cls = _bce_with_logits(output.seg_logits, labels)
        target = model.offset_target(sample.motion_target, sample.axis_extents)
        off_term = ag.mean(ag.huber(ag.sub(output.norm_motion, Tensor(target))))
        ang_term = ag.mean(ag.huber(ag.sub(output.dtheta, Tensor([sample.theta_target]))))
        if not np.any(labels == 1):
            flags["no_positives"] = True
    else:
        raise TypeError(f"unknown model output {type(output).__name__}")
    total = ag.add(
        ag.scale(cls, cfg.lambda_cls),
        ag.add(ag.scale(off_term, cfg.lambda_off), ag.scale(ang_term, cfg.lambda_ang)),
    )
    return total, flags


def _forward_sample(model: _TrackerBase, sample):
    if isinstance(sample, SiameseSample):
        return model.forward(sample.template_points, _template_box(sample), sample.search_points)
    return model.forward(sample.prev_points, sample.prev_mask, sample.cur_points)


def _template_box(sample: SiameseSample) -> BBox3D:
    w, h, l = sample.extents_whl
    return BBox3D((0.0, 0.0, 0.0), w, h, l, 0.0)


class TrainResult(NamedTuple):
    model: _TrackerBase
    curve: list[tuple[int, float]]


def train(samples: list, model: _TrackerBase, cfg: TrainConfig) -> TrainResult:
    """Seeded batched Adam loop over pre-built samples."""
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    curve = []
    for step in range(1, cfg.steps + 1):
        picks = rng.integers(0, len(samples), size=cfg.batch_size)
        optimizer.zero_grad()
        total = None
        for idx in picks:
            sample = samples[int(idx)]
            loss, _ = loss_total(model, _forward_sample(model, sample), sample, cfg)
            total = loss if total is None else ag.add(total, loss)
        total = ag.scale(total, 1.0 / cfg.batch_size)
        value = float(total.data)
        if not math.isfinite(value):
            raise RuntimeError(f"loss diverged (non-finite) at step {step}")
        total.backward()
        optimizer.step()
        curve.append((step, value))
    return TrainResult(model, curve)


def train_on_sequences(sequences: list[Sequence], model: _TrackerBase, cfg: TrainConfig) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    samples = build_training_samples(sequences, model, cfg, rng)
    return train(samples, model, cfg)


def loss_curve_csv(curve: list[tuple[int, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["step", "loss"])
    for step, value in curve:
        writer.writerow([step, f"{value:.8f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# One-pass tracking


class TrackResult(NamedTuple):
    boxes: list[BBox3D]
    diagnostics: list[dict]


def track_sequence(
    model: _TrackerBase, initial_box: BBox3D, frames: list[PointCloud], seed: int = 0
) -> TrackResult:
    """One-pass protocol: ground truth enters only through `initial_box`.

    The frame list carries point clouds only; frame 0's prediction is the
    given box, and an empty search region carries the previous prediction
    forward with a diagnostic flag.
    """
    if not frames:
        raise ValueError("empty sequence")
    boxes = [initial_box]
    diags: list[dict] = [{"empty": False}]
    template = None
    if model.paradigm == "siamese":
        rng = np.random.default_rng([seed, 0])
        tpl = sample_region_points(frames[0], RegionSpec(initial_box), model.settings.n_template, rng)
        template = tpl.points
        if tpl.empty:
            diags[0] = {"empty": True}
    prev_box = initial_box
    for i in range(1, len(frames)):
        rng = np.random.default_rng([seed, i])
        with ag.no_grad():
            if model.paradigm == "siamese":
                new_box, diag = model.track_step(prev_box, template, frames[i], rng)
            else:
                new_box, diag = model.track_step(prev_box, frames[i - 1], frames[i], rng)
        if new_box is None:
            new_box = prev_box
        boxes.append(new_box)
        diags.append(diag)
        prev_box = new_box
    return TrackResult(boxes, diags)


def track_dataset(model: _TrackerBase, sequences: list[Sequence], seed: int = 0) -> dict[str, TrackResult]:
    """Track every sequence from its frame-0 annotation; later labels are not read."""
    results = {}
    for seq in sequences:
        initial = seq.target_boxes()[0]
        clouds = [f.cloud for f in seq.frames]
        results[seq.sequence_id] = track_sequence(model, initial, clouds, seed=seed)
    return results
