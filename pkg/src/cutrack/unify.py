"""Size-scaled search regions, normalized offsets and shape-aware labels.

These are the two non-architectural unification mechanisms: regions grown
proportionally to the target's own extents (so foreground/background ratio
is category-independent), and learning targets expressed relative to the
target's size. The fixed-margin region and fixed-radius labels are kept as
ablation baselines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import BBox3D, PointCloud, crop_points_in_box, to_canonical


@dataclass(frozen=True)
class RegionSpec:
    """A search region around a reference box.

    Proportional regions carry the scale `alpha` used to grow the reference
    extents; fixed-margin baseline regions carry `margin_m` instead.
    """

    box: BBox3D
    alpha: float | None = None
    margin_m: float | None = None


def make_search_region(prev_box: BBox3D, alpha: float) -> RegionSpec:
    """Region with extents (1 + alpha) times the reference, same center and yaw."""
    if alpha <= 0.0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    s = 1.0 + alpha
    return RegionSpec(prev_box.with_extents(s * prev_box.w, s * prev_box.h, s * prev_box.l), alpha=alpha)


def make_fixed_margin_region(prev_box: BBox3D, margin_m: float) -> RegionSpec:
    """Baseline region: the reference box grown by a fixed distance on every side."""
    if margin_m <= 0.0:
        raise ValueError(f"margin must be > 0, got {margin_m}")
    d = 2.0 * margin_m
    return RegionSpec(
        prev_box.with_extents(prev_box.w + d, prev_box.h + d, prev_box.l + d), margin_m=margin_m
    )


class RegionSample(NamedTuple):
    points: PointCloud  # region-canonical frame
    empty: bool  # True when the crop had no points and origins were substituted


def sample_region_points(
    scene: PointCloud, region: RegionSpec, n_s: int, seed
) -> RegionSample:
    """Crop the scene to the region and resample to exactly n_s canonical points.

    More points than n_s: seeded subsample without replacement. Fewer (but
    nonzero): keep all and pad by drawing with replacement. Empty crop: n_s
    copies of the origin, flagged.
    """
    if n_s < 1:
        raise ValueError(f"n_s must be >= 1, got {n_s}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cropped = to_canonical(crop_points_in_box(scene, region.box), region.box)
    count = len(cropped)
    if count == 0:
        return RegionSample(PointCloud(np.zeros((n_s, 3))), True)
    if count >= n_s:
        keep = rng.choice(count, size=n_s, replace=False)
        return RegionSample(PointCloud(cropped.points[keep]), False)
    pad = rng.choice(count, size=n_s - count, replace=True)
    return RegionSample(PointCloud(np.vstack([cropped.points, cropped.points[pad]])), False)


def normalize_offset(delta, extents) -> np.ndarray:
    """Componentwise division of a displacement by the per-axis extent."""
    delta = np.asarray(delta, dtype=np.float64)
    extents = np.asarray(extents, dtype=np.float64)
    if np.any(extents <= 0.0):
        raise ValueError(f"extents must be positive, got {extents}")
    return delta / extents


def denormalize_offset(normalized, extents) -> np.ndarray:
    """Exact inverse of :func:`normalize_offset`."""
    normalized = np.asarray(normalized, dtype=np.float64)
    extents = np.asarray(extents, dtype=np.float64)
    if np.any(extents <= 0.0):
        raise ValueError(f"extents must be positive, got {extents}")
    return normalized * extents


def shape_aware_labels(points, box_extents, beta: float) -> np.ndarray:
    """Point labels from a cube scaled to the target's own extents.

    `points` are in target-canonical coordinates; `box_extents` is the
    (w, h, l) triple. A point is positive iff |x| <= beta*l/2, |y| <= beta*w/2
    and |z| <= beta*h/2 (beta scales the full extents).
    """
    if beta <= 0.0:
        raise ValueError(f"beta must be > 0, got {beta}")
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    w, h, l = (float(v) for v in box_extents)
    inside = (
        (np.abs(pts[:, 0]) <= beta * l / 2.0)
        & (np.abs(pts[:, 1]) <= beta * w / 2.0)
        & (np.abs(pts[:, 2]) <= beta * h / 2.0)
    )
    return inside.astype(np.int64)


def center_distance_labels(points, radius_m: float) -> np.ndarray:
    """Ablation baseline: positive iff within a fixed distance of the target center."""
    if radius_m <= 0.0:
        raise ValueError(f"radius must be > 0, got {radius_m}")
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    return (np.linalg.norm(pts, axis=1) <= radius_m).astype(np.int64)
