"""Success/Precision metrics, table aggregation, dataset statistics, latency.

Success is the area under the overlap-threshold curve, which equals the mean
3D IoU; Precision is the area under the center-distance curve over [0, 2 m].
Both are reported as percentages. Category rows aggregate by frame-weighted
mean, matching how per-category results combine into a single mean column.
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .geometry import BBox3D, center_distance, rotated_iou_3d
from .datasets import Sequence
from .model_io import atomic_write_bytes

PRECISION_MAX_DIST = 2.0  # meters; the distance-threshold sweep cap


@dataclass(frozen=True)
class FrameResult:
    iou: float
    center_dist: float

    def __post_init__(self):
        if not (0.0 <= self.iou <= 1.0 and math.isfinite(self.center_dist) and self.center_dist >= 0.0):
            raise ValueError(f"invalid frame result iou={self.iou} dist={self.center_dist}")


@dataclass(frozen=True)
class CategoryResult:
    category: str
    frame_count: int
    success: float
    precision: float


def frame_results(predicted: list[BBox3D], ground_truth: list[BBox3D]) -> list[FrameResult]:
    if len(predicted) != len(ground_truth):
        raise ValueError(f"{len(predicted)} predictions vs {len(ground_truth)} ground-truth boxes")
    return [
        FrameResult(rotated_iou_3d(p, g), center_distance(p, g))
        for p, g in zip(predicted, ground_truth)
    ]


def success_metric(results: list[FrameResult]) -> float:
    """AUC of fraction{iou > t} over t in [0, 1], i.e. 100 * mean IoU."""
    if not results:
        raise ValueError("success metric over an empty result list")
    return 100.0 * float(np.mean([r.iou for r in results]))


def precision_metric(results: list[FrameResult], max_dist: float = PRECISION_MAX_DIST) -> float:
    """AUC of fraction{dist < t} over t in [0, max_dist], normalized to [0, 100]."""
    if not results:
        raise ValueError("precision metric over an empty result list")
    d = np.array([r.center_dist for r in results])
    return 100.0 * float(np.mean(np.clip(1.0 - d / max_dist, 0.0, 1.0)))


def aggregate_weighted_mean(rows: list[CategoryResult], name: str = "mean") -> CategoryResult:
    """Frame-count-weighted average of success and precision across categories."""
    if not rows:
        raise ValueError("aggregation over an empty row list")
    total = sum(r.frame_count for r in rows)
    succ = sum(r.success * r.frame_count for r in rows) / total
    prec = sum(r.precision * r.frame_count for r in rows) / total
    return CategoryResult(name, total, succ, prec)


# ---------------------------------------------------------------------------
# Dataset statistics (per-category size, motion and distractor reports)


@dataclass(frozen=True)
class Histogram:
    name: str
    bin_lo: np.ndarray
    bin_hi: np.ndarray
    count: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(self.bin_lo, self.bin_hi, self.count):
            writer.writerow([f"{lo:.6g}", f"{hi:.6g}" if math.isfinite(hi) else "inf", int(c)])
        return buf.getvalue()


def _histogram(name: str, values: list[float], bins: int = 24) -> Histogram:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return Histogram(name, np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))
    counts, edges = np.histogram(arr, bins=bins)
    return Histogram(name, edges[:-1], edges[1:], counts)


def category_stats(
    sequences: list[Sequence], distractor_radius: float = 5.0, bins: int = 24
) -> dict[str, Histogram]:
    """Histograms keyed "{category}_{quantity}" plus distractor-count bins.

    Sizes come from every target annotation; motion deltas from consecutive
    target boxes; a distractor is any other annotated object whose BEV center
    distance to the target is below `distractor_radius`. Distractor counts
    use the four levels 0, 1, 2 and >=3.
    """
    sizes: dict[str, dict[str, list[float]]] = {}
    motions: dict[str, dict[str, list[float]]] = {}
    distractor_levels: dict[str, np.ndarray] = {}
    for seq in sequences:
        cat = seq.category
        sizes.setdefault(cat, {"length": [], "width": [], "height": []})
        motions.setdefault(cat, {"dx": [], "dy": [], "dz": [], "dyaw": []})
        distractor_levels.setdefault(cat, np.zeros(4, dtype=np.int64))
        boxes = seq.target_boxes()
        for frame, box in zip(seq.frames, boxes):
            sizes[cat]["length"].append(box.l)
            sizes[cat]["width"].append(box.w)
            sizes[cat]["height"].append(box.h)
            n_close = sum(
                1
                for ann in frame.boxes
                if ann.track_id != 0
                and float(np.linalg.norm((ann.box.center - box.center)[:2])) < distractor_radius
            )
            distractor_levels[cat][min(n_close, 3)] += 1
        for prev, cur in zip(boxes, boxes[1:]):
            d = cur.center - prev.center
            motions[cat]["dx"].append(float(d[0]))
            motions[cat]["dy"].append(float(d[1]))
            motions[cat]["dz"].append(float(d[2]))
            dyaw = math.remainder(cur.yaw - prev.yaw, 2.0 * math.pi)
            motions[cat]["dyaw"].append(dyaw)

    out: dict[str, Histogram] = {}
    for cat in sorted(sizes):
        for qty, vals in sizes[cat].items():
            out[f"{cat}_{qty}"] = _histogram(f"{cat}_{qty}", vals, bins)
        for qty, vals in motions[cat].items():
            out[f"{cat}_{qty}"] = _histogram(f"{cat}_{qty}", vals, bins)
        counts = distractor_levels[cat]
        out[f"{cat}_distractors"] = Histogram(
            f"{cat}_distractors",
            np.array([0.0, 1.0, 2.0, 3.0]),
            np.array([1.0, 2.0, 3.0, math.inf]),
            counts,
        )
    return out


def write_stats_csvs(stats: dict[str, Histogram], out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    for name, hist in stats.items():
        atomic_write_bytes(os.path.join(out_dir, f"{name}.csv"), hist.to_csv().encode("utf-8"))


# ---------------------------------------------------------------------------
# Latency harness


@dataclass(frozen=True)
class LatencyRow:
    cloud_size: int
    stage: str  # preprocess | forward | postprocess
    mean_ms: float
    std_ms: float
    runs: int


def latency_bench(step_fn, cloud_sizes: list[int], runs: int = 100, warmup: int = 5) -> list[LatencyRow]:
    """Time one tracking step per cloud size, split into its three stages.

    `step_fn(size)` must return a dict {"preprocess": s, "forward": s,
    "postprocess": s} of stage durations for a single step.
    """
    if runs < 1:
        raise ValueError("need at least one timed run")
    rows = []
    for size in cloud_sizes:
        for _ in range(warmup):
            step_fn(size)
        samples = {"preprocess": [], "forward": [], "postprocess": []}
        for _ in range(runs):
            durations = step_fn(size)
            for key in samples:
                samples[key].append(durations[key])
        for stage, vals in samples.items():
            arr = 1000.0 * np.asarray(vals)
            rows.append(LatencyRow(size, stage, float(arr.mean()), float(arr.std()), runs))
    return rows


def latency_csv(rows: list[LatencyRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["cloud_size", "stage", "mean_ms", "std_ms", "runs"])
    for r in rows:
        writer.writerow([r.cloud_size, r.stage, f"{r.mean_ms:.4f}", f"{r.std_ms:.4f}", r.runs])
    return buf.getvalue()


def metrics_csv(rows: list[CategoryResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["category", "frames", "success", "precision"])
    for r in rows:
        writer.writerow([r.category, r.frame_count, f"{r.success:.2f}", f"{r.precision:.2f}"])
    return buf.getvalue()
