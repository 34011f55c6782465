"""Command-line entry points: gen, train, track, eval, stats, sweep, gradcheck, bench.

Exit codes: 0 success, 2 invalid config (message names the key path),
3 missing input file, 4 gradient-check failure, 1 other errors. All outputs
are written atomically (temp file + rename) under the requested paths.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autograd as ag
from .config import ConfigError, RunConfig
from .datasets import Sequence, gen_synthetic, read_dataset, write_dataset
from .encoder import default_encoder_config
from .evaluate import (
    CategoryResult,
    aggregate_weighted_mean,
    category_stats,
    frame_results,
    latency_bench,
    latency_csv,
    metrics_csv,
    precision_metric,
    success_metric,
    write_stats_csvs,
)
from .geometry import BBox3D, PointCloud
from .model_io import atomic_write_bytes
from .trackers import (
    build_tracker,
    load_tracker,
    loss_curve_csv,
    select_best_proposal,
    track_sequence,
    train_on_sequences,
)
from .unify import RegionSpec, make_search_region, sample_region_points


def _load_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    return RunConfig.from_file(path)


def _require_dir(path: str) -> str:
    if not os.path.isdir(path):
        raise FileNotFoundError(path)
    return path


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    return path


def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    sequences = gen_synthetic(cfg.synth)
    write_dataset(sequences, args.out)
    print(f"wrote {len(sequences)} sequences to {args.out}")
    return 0


def _train_model(cfg: RunConfig, sequences: list[Sequence]):
    model = build_tracker(
        cfg.paradigm,
        cfg.encoder,
        cfg.settings,
        head_hidden=cfg.head_hidden,
        seg_threshold=cfg.seg_threshold,
        seed=cfg.seed,
    )
    return train_on_sequences(sequences, model, cfg.train)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    sequences = read_dataset(_require_dir(args.data))
    result = _train_model(cfg, sequences)
    result.model.save(args.out)
    if args.curve:
        atomic_write_bytes(args.curve, loss_curve_csv(result.curve).encode("utf-8"))
    print(f"trained {cfg.paradigm} model for {cfg.train.steps} steps; final loss {result.curve[-1][1]:.4f}")
    return 0


def _track_all(model, sequences: list[Sequence], seed: int, jobs: int) -> dict:
    def one(seq: Sequence):
        initial = seq.target_boxes()[0]
        clouds = [f.cloud for f in seq.frames]
        return seq.sequence_id, track_sequence(model, initial, clouds, seed=seed)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return dict(pool.map(one, sequences))
    return dict(one(s) for s in sequences)


def cmd_track(args) -> int:
    model = load_tracker(_require_file(args.model))
    sequences = read_dataset(_require_dir(args.data))
    results = _track_all(model, sequences, args.seed, args.jobs)
    payload = {
        "sequences": [
            {
                "sequence_id": seq.sequence_id,
                "category": seq.category,
                "frames": [f.frame_id for f in seq.frames],
                "boxes": [
                    [b.center[0], b.center[1], b.center[2], b.w, b.h, b.l, b.yaw]
                    for b in results[seq.sequence_id].boxes
                ],
                "diagnostics": results[seq.sequence_id].diagnostics,
            }
            for seq in sequences
        ]
    }
    atomic_write_bytes(args.out, json.dumps(payload, indent=1).encode("utf-8"))
    print(f"tracked {len(sequences)} sequences -> {args.out}")
    return 0


def evaluate_results(results_payload: dict, sequences: list[Sequence]) -> list[CategoryResult]:
    by_id = {s.sequence_id: s for s in sequences}
    per_category: dict[str, list] = {}
    for entry in results_payload["sequences"]:
        seq = by_id.get(entry["sequence_id"])
        if seq is None:
            raise ValueError(f"results reference unknown sequence {entry['sequence_id']!r}")
        predicted = [BBox3D((b[0], b[1], b[2]), b[3], b[4], b[5], b[6]) for b in entry["boxes"]]
        per_category.setdefault(seq.category, []).extend(frame_results(predicted, seq.target_boxes()))
    rows = [
        CategoryResult(cat, len(res), success_metric(res), precision_metric(res))
        for cat, res in sorted(per_category.items())
    ]
    rows.append(aggregate_weighted_mean(rows))
    return rows


def cmd_eval(args) -> int:
    with open(_require_file(args.results), "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    sequences = read_dataset(_require_dir(args.data))
    rows = evaluate_results(payload, sequences)
    atomic_write_bytes(args.out, metrics_csv(rows).encode("utf-8"))
    mean = rows[-1]
    print(f"success {mean.success:.1f} precision {mean.precision:.1f} over {mean.frame_count} frames")
    return 0


def cmd_stats(args) -> int:
    sequences = read_dataset(_require_dir(args.data))
    stats = category_stats(sequences, distractor_radius=args.radius)
    write_stats_csvs(stats, args.out)
    print(f"wrote {len(stats)} histogram files to {args.out}")
    return 0


def run_benchmark(cfg: RunConfig, workdir: str) -> list[CategoryResult]:
    """gen / train / track / eval, end to end, entirely under `workdir`."""
    train_seqs = gen_synthetic(cfg.synth)
    eval_seqs = gen_synthetic(cfg.eval_synth)
    result = _train_model(cfg, train_seqs)
    results = _track_all(result.model, eval_seqs, cfg.seed, jobs=1)
    payload = {
        "sequences": [
            {
                "sequence_id": s.sequence_id,
                "category": s.category,
                "frames": [f.frame_id for f in s.frames],
                "boxes": [
                    [b.center[0], b.center[1], b.center[2], b.w, b.h, b.l, b.yaw]
                    for b in results[s.sequence_id].boxes
                ],
                "diagnostics": results[s.sequence_id].diagnostics,
            }
            for s in eval_seqs
        ]
    }
    os.makedirs(workdir, exist_ok=True)
    atomic_write_bytes(os.path.join(workdir, "results.json"), json.dumps(payload, indent=1).encode("utf-8"))
    rows = evaluate_results(payload, eval_seqs)
    atomic_write_bytes(os.path.join(workdir, "metrics.csv"), metrics_csv(rows).encode("utf-8"))
    result.model.save(os.path.join(workdir, "model.cutm"))
    return rows


def cmd_sweep(args) -> int:
    cfg_path = _require_file(args.config)
    with open(cfg_path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if args.param not in ("alpha", "beta"):
        raise ConfigError("param", f"sweep parameter must be alpha or beta, got {args.param!r}")
    try:
        values = [float(v) for v in args.values.split(",") if v]
    except ValueError:
        raise ConfigError("values", f"could not parse sweep values {args.values!r}") from None
    if not values:
        raise ConfigError("values", "no sweep values given")
    summary = ["value,success,precision\n"]
    for value in values:
        raw_v = dict(raw)
        raw_v[args.param] = value
        cfg = RunConfig(raw_v)
        subdir = os.path.join(args.out, f"{args.param}_{value:g}")
        rows = run_benchmark(cfg, subdir)
        mean = rows[-1]
        summary.append(f"{value:g},{mean.success:.2f},{mean.precision:.2f}\n")
        print(f"{args.param}={value:g}: success {mean.success:.1f} precision {mean.precision:.1f}")
    atomic_write_bytes(os.path.join(args.out, "summary.csv"), "".join(summary).encode("utf-8"))
    return 0


def run_gradient_suite(verbose: bool = True) -> list[tuple[str, float, float, bool]]:
    """The primitive/block/head finite-difference checks; returns rows of
    (name, max relative error, tolerance, passed)."""
    from .encoder import BlockConfig, DeformableAttentionBlock, EncoderConfig
    from .trackers import (
        MotionHeadConfig,
        MotionSample,
        MotionTracker,
        SiameseHeadConfig,
        SiameseSample,
        SiameseTracker,
        TrackSettings,
        TrainConfig,
        loss_total,
        _forward_sample,
    )
    from .geometry import BBox3D, PointCloud

    rows = []
    rng = np.random.default_rng(7)

    def check(name, f, x, tol):
        err = ag.gradcheck(f, x)
        rows.append((name, err, tol, err < tol))
        if verbose:
            status = "ok" if err < tol else "FAIL"
            print(f"  {name:<28s} rel err {err:.3e}  (tol {tol:.0e})  {status}")

    x = ag.Tensor(rng.normal(size=(5, 4)))
    w = ag.Tensor(rng.normal(size=(4, 3)))
    b = ag.Tensor(rng.normal(size=3))
    probe = rng.normal(size=(5, 3))
    check("matmul", lambda t: ag.mean(ag.hadamard(ag.matmul(t, w), ag.Tensor(probe))), x, 1e-6)
    check("broadcast_add", lambda t: ag.mean(ag.hadamard(ag.broadcast_add(ag.matmul(x, w), t), ag.Tensor(probe))), b, 1e-6)
    check("relu", lambda t: ag.mean(ag.relu(t)), ag.Tensor(rng.normal(size=(4, 4)) + 0.05), 1e-6)
    check("tanh", lambda t: ag.mean(ag.tanh(t)), ag.Tensor(rng.normal(size=6)), 1e-6)
    check("exp", lambda t: ag.mean(ag.exp(t)), ag.Tensor(rng.normal(size=6)), 1e-6)
    check("sigmoid", lambda t: ag.mean(ag.sigmoid(t)), ag.Tensor(rng.normal(size=6)), 1e-6)
    check("softplus", lambda t: ag.mean(ag.softplus(t)), ag.Tensor(rng.normal(size=6)), 1e-6)
    check("huber", lambda t: ag.mean(ag.huber(t)), ag.Tensor(rng.normal(size=8) * 2.0), 1e-6)
    check(
        "softmax",
        lambda t: ag.mean(ag.hadamard(ag.softmax(t, axis=1), ag.Tensor(probe[:, :3]))),
        ag.Tensor(rng.normal(size=(5, 3))),
        1e-6,
    )
    check("mean/sum/concat", lambda t: ag.sumt(ag.mean(ag.concat([t, t], axis=1), axis=0)), ag.Tensor(rng.normal(size=(3, 2))), 1e-6)
    idx = np.array([[0, 2], [1, 1]])
    check("gather_rows", lambda t: ag.mean(ag.gather_rows(t, idx)), ag.Tensor(rng.normal(size=(3, 2))), 1e-6)
    sc = ag.Tensor(rng.uniform(0.5, 2.0, size=(2, 3)))
    an = rng.normal(size=(2, 3))
    check("deform_transform", lambda t: ag.mean(ag.deform_transform(t, ag.Tensor(an))), sc, 1e-6)
    rel = ag.Tensor(rng.normal(size=(2, 4, 3)))
    tm = ag.Tensor(rng.normal(size=(2, 3, 3)))
    check("apply_transform", lambda t: ag.mean(ag.apply_transform(t, rel)), tm, 1e-6)

    # full block: 8 points, groups of 4, feature dim 4
    pts = rng.uniform(-1.0, 1.0, size=(8, 3))
    block = DeformableAttentionBlock(BlockConfig(4, 4, 4, 0.8), 8, rng, "gc")
    for p in block.deform_mlp.parameters():
        p.data = rng.normal(scale=0.2, size=p.data.shape)
    centers = np.arange(4)
    readout = rng.normal(size=(4, 1))
    check(
        "attention block",
        lambda t: ag.mean(ag.matmul(block.forward(pts, t, centers), ag.Tensor(readout))),
        ag.Tensor(rng.normal(size=(8, 4))),
        1e-4,
    )

    # head-level checks on 32-point toys
    enc2 = EncoderConfig(((12, BlockConfig(3, 8, 4, 0.8)), (6, BlockConfig(8, 8, 4, 1.6))), pos_hidden=8)
    st = TrackSettings(n_template=16, n_search=32)
    tcfg = TrainConfig(paradigm="siamese", steps=1)
    siam = SiameseTracker(SiameseHeadConfig(enc2, head_hidden=16), st, seed=3)
    tpl_pts = rng.uniform(-0.8, 0.8, size=(16, 3))
    srch_pts = rng.uniform(-1.2, 1.2, size=(32, 3))
    gt_region = BBox3D((0.15, -0.1, 0.05), 1.2, 1.1, 1.4, 0.05)
    sample_s = SiameseSample(
        PointCloud(tpl_pts), PointCloud(srch_pts), gt_region, gt_region.axis_extents, (1.2, 1.1, 1.4), 0.05
    )
    # check against the value-path weight: all of its gradient components sit
    # well above the finite-difference noise floor
    p_s = siam.encoder.blocks[0].attention.wv.weight

    def siam_loss(_):
        out = _forward_sample(siam, sample_s)
        loss, _flags = loss_total(siam, out, sample_s, tcfg)
        return loss

    check("siamese head loss", siam_loss, p_s, 1e-4)

    enc5 = EncoderConfig(((12, BlockConfig(5, 8, 4, 0.8)), (6, BlockConfig(8, 8, 4, 1.6))), pos_hidden=8)
    mot = MotionTracker(MotionHeadConfig(enc5, head_hidden=16, seg_threshold=0.5), st, seed=4)
    prev_pts = rng.uniform(-0.8, 0.8, size=(16, 3))
    cur_pts = rng.uniform(-1.0, 1.0, size=(32, 3))
    gt_prev = BBox3D((0.0, 0.0, 0.0), 1.2, 1.1, 1.4, 0.0)
    gt_cur = BBox3D((0.3, 0.1, 0.0), 1.2, 1.1, 1.4, 0.04)
    sample_m = MotionSample(
        PointCloud(prev_pts),
        (rng.random(16) > 0.5).astype(np.float64),
        PointCloud(cur_pts),
        gt_prev,
        gt_cur,
        gt_prev.axis_extents,
        (1.2, 1.1, 1.4),
        gt_cur.center.copy(),
        0.04,
    )
    mcfg = TrainConfig(paradigm="motion", steps=1)
    p_m = mot.encoder.blocks[0].attention.wv.weight

    def mot_loss(_):
        out = _forward_sample(mot, sample_m)
        loss, _flags = loss_total(mot, out, sample_m, mcfg)
        return loss

    check("motion head loss", mot_loss, p_m, 1e-4)
    return rows


def cmd_gradcheck(args) -> int:
    rows = run_gradient_suite(verbose=True)
    failed = [r for r in rows if not r[3]]
    if failed:
        print(f"{len(failed)} gradient checks FAILED")
        return 4
    print(f"all {len(rows)} gradient checks passed")
    return 0


def cmd_bench(args) -> int:
    model = load_tracker(_require_file(args.model))
    sizes = [int(s) for s in args.sizes.split(",") if s]
    rng = np.random.default_rng(0)
    box = BBox3D((0.0, 0.0, 0.8), 1.8, 1.6, 4.2, 0.3)
    scenes = {
        size: PointCloud(rng.uniform(-6.0, 6.0, size=(size, 3)) + box.center) for size in sizes
    }

    def step_fn(size: int) -> dict:
        t0 = time.perf_counter()
        region = make_search_region(box, model.settings.alpha)
        srng = np.random.default_rng(1)
        prev = sample_region_points(scenes[size], region, model.settings.n_template, srng)
        cur = sample_region_points(scenes[size], region, model.settings.n_search, srng)
        t1 = time.perf_counter()
        with ag.no_grad():
            if model.paradigm == "motion":
                mask = np.zeros(len(prev.points))
                out = model.forward(prev.points, mask, cur.points)
            else:
                out = model.forward(prev.points, box, cur.points)
        t2 = time.perf_counter()
        if model.paradigm == "motion":
            _ = out.norm_motion.data * box.axis_extents
        else:
            _ = select_best_proposal(out.proposals)
        t3 = time.perf_counter()
        return {"preprocess": t1 - t0, "forward": t2 - t1, "postprocess": t3 - t2}

    rows = latency_bench(step_fn, sizes, runs=args.runs)
    atomic_write_bytes(args.out, latency_csv(rows).encode("utf-8"))
    for r in rows:
        print(f"size {r.cloud_size:>6d} {r.stage:<12s} {r.mean_ms:8.3f} ms +- {r.std_ms:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cutrack", description="Category-unified point cloud tracking toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthesize a tracking dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a tracker")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", default=None, help="optional loss-curve CSV path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("track", help="one-pass tracking over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("eval", help="metrics from tracking results")
    p.add_argument("--results", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("stats", help="per-category dataset statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=5.0)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("sweep", help="end-to-end runs over one scale factor")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=["alpha", "beta"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="latency breakdown per cloud size")
    p.add_argument("--model", required=True)
    p.add_argument("--sizes", default="256,512,1024")
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--runs", type=int, default=100)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
