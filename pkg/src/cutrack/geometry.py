"""Oriented 3D boxes, rotated IoU and point-grouping primitives.

Conventions used throughout the package: z is the up axis, a box with yaw 0
has its length l along local x, width w along local y and height h along z.
Yaw is a rotation about z, normalized to (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Collinearity tolerance for the BEV polygon clipper, in meters.
CLIP_EPS = 1e-9


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


def as_vec3(v) -> np.ndarray:
    """Coerce a length-3 array-like into a finite float64 vector."""
    out = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"vector has non-finite components: {out}")
    return out


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points, stored as an (N, 3) float64 array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"point array must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class BBox3D:
    """Oriented box: center, extents (w lateral, h vertical, l longitudinal), yaw."""

    center: np.ndarray
    w: float
    h: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", as_vec3(self.center))
        for name in ("w", "h", "l"):
            v = float(getattr(self, name))
            if not (v > 0.0 and math.isfinite(v)):
                raise ValueError(f"box extent {name} must be positive and finite, got {v}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def extents(self) -> tuple[float, float, float]:
        """Extents in (w, h, l) order."""
        return (self.w, self.h, self.l)

    @property
    def axis_extents(self) -> np.ndarray:
        """Extent measured along each canonical axis, in (x, y, z) order: (l, w, h)."""
        return np.array([self.l, self.w, self.h])

    @property
    def volume(self) -> float:
        return self.w * self.h * self.l

    def with_extents(self, w: float, h: float, l: float) -> "BBox3D":
        return BBox3D(self.center, w, h, l, self.yaw)

    def bev_corners(self) -> np.ndarray:
        """BEV footprint corners as a (4, 2) array in counter-clockwise order."""
        hx, hy = self.l / 2.0, self.w / 2.0
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def corners(self) -> np.ndarray:
        """All 8 corners as an (8, 3) array (bottom face first, CCW)."""
        bev = self.bev_corners()
        lo = self.center[2] - self.h / 2.0
        hi = self.center[2] + self.h / 2.0
        bottom = np.column_stack([bev, np.full(4, lo)])
        top = np.column_stack([bev, np.full(4, hi)])
        return np.vstack([bottom, top])


@dataclass(frozen=True)
class GroupIndex:
    """Members of one local neighborhood, padded to a fixed size k.

    ``padded`` marks groups whose member list was filled by repetition;
    ``empty_ball`` marks groups where no point qualified and the fallback to
    the globally nearest point was used.
    """

    center_index: int
    member_indices: np.ndarray
    padded: bool = False
    empty_ball: bool = False

    def __post_init__(self):
        idx = np.asarray(self.member_indices, dtype=np.int64)
        object.__setattr__(self, "member_indices", idx)


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_canonical(points: PointCloud, box: BBox3D) -> PointCloud:
    """Map points into the box frame: translate by -center, rotate by -yaw about z."""
    shifted = points.points - box.center
    return PointCloud(shifted @ _rot_z(-box.yaw).T)


def from_canonical(points: PointCloud, box: BBox3D) -> PointCloud:
    """Inverse of :func:`to_canonical`."""
    return PointCloud(points.points @ _rot_z(box.yaw).T + box.center)


def canonical_to_world(xyz: np.ndarray, box: BBox3D) -> np.ndarray:
    """Array-level :func:`from_canonical` for a single point or an (N, 3) batch."""
    return np.asarray(xyz, dtype=np.float64) @ _rot_z(box.yaw).T + box.center


def world_to_canonical(xyz: np.ndarray, box: BBox3D) -> np.ndarray:
    """Array-level :func:`to_canonical`."""
    return (np.asarray(xyz, dtype=np.float64) - box.center) @ _rot_z(-box.yaw).T


def points_in_box_mask(points: np.ndarray, box: BBox3D) -> np.ndarray:
    """Boolean mask of points inside the box (boundary inclusive)."""
    local = world_to_canonical(points, box)
    return (
        (np.abs(local[:, 0]) <= box.l / 2.0)
        & (np.abs(local[:, 1]) <= box.w / 2.0)
        & (np.abs(local[:, 2]) <= box.h / 2.0)
    )


def crop_points_in_box(cloud: PointCloud, box: BBox3D) -> PointCloud:
    """Points of `cloud` inside `box`, in their original order."""
    if len(cloud) == 0:
        return cloud
    return PointCloud(cloud.points[points_in_box_mask(cloud.points, box)])


def center_distance(a: BBox3D, b: BBox3D) -> float:
    """Euclidean distance between box centers, meters."""
    return float(np.linalg.norm(a.center - b.center))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a convex CCW polygon.

    Points within CLIP_EPS of a clip edge count as inside, so coincident
    boxes clip to themselves exactly.
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            return np.zeros((0, 2))
        cp1 = clip[i]
        cp2 = clip[(i + 1) % n]
        ex, ey = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def inside(p):
            return ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0]) >= -CLIP_EPS

        def intersect(s, e):
            dx, dy = e[0] - s[0], e[1] - s[1]
            denom = ex * dy - ey * dx
            if abs(denom) < CLIP_EPS * CLIP_EPS:
                return e
            t = (ex * (s[1] - cp1[1]) - ey * (s[0] - cp1[0])) / -denom
            return (s[0] + t * dx, s[1] + t * dy)

        inputs = output
        output = []
        s = inputs[-1]
        s_in = inside(s)
        for e in inputs:
            e_in = inside(e)
            if e_in:
                if not s_in:
                    output.append(intersect(s, e))
                output.append(e)
            elif s_in:
                output.append(intersect(s, e))
            s, s_in = e, e_in
    return np.array(output) if output else np.zeros((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if poly.shape[0] < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1))))


def rotated_iou_3d(a: BBox3D, b: BBox3D) -> float:
    """3D IoU of two yaw-oriented boxes.

    Intersection is the BEV convex polygon overlap (polygon clipping) times
    the vertical interval overlap. Symmetric in its arguments; result in [0, 1].
    """
    z_lo = max(a.center[2] - a.h / 2.0, b.center[2] - b.h / 2.0)
    z_hi = min(a.center[2] + a.h / 2.0, b.center[2] + b.h / 2.0)
    dz = z_hi - z_lo
    if dz <= 0.0:
        return 0.0
    inter_poly = _clip_polygon(a.bev_corners(), b.bev_corners())
    inter = _polygon_area(inter_poly) * dz
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def farthest_point_sample(cloud: PointCloud, m: int) -> np.ndarray:
    """Greedy farthest point sampling, deterministic.

    The first pick is index 0; each later pick maximizes the minimum distance
    to the picked set, ties broken by lowest index. Returns the m indices in
    pick order.
    """
    n = len(cloud)
    if m < 1 or m > n:
        raise ValueError(f"insufficient points: requested {m} samples from {n} points")
    pts = cloud.points
    picks = np.empty(m, dtype=np.int64)
    picks[0] = 0
    min_d2 = np.sum((pts - pts[0]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # argmax takes the lowest index on ties
        picks[i] = nxt
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return picks


def _topk_padded(dists: np.ndarray, qualify: np.ndarray, k: int, center_index: int) -> GroupIndex:
    """Shared selection/padding policy for radius queries (sorted by distance, then index)."""
    order = np.lexsort((np.arange(dists.shape[0]), dists))
    qualified = order[qualify[order]]
    if qualified.size >= k:
        return GroupIndex(center_index, qualified[:k])
    if qualified.size > 0:
        pad = np.full(k - qualified.size, qualified[0])
        return GroupIndex(center_index, np.concatenate([qualified, pad]), padded=True)
    nearest = order[0]
    return GroupIndex(center_index, np.full(k, nearest), padded=True, empty_ball=True)


def ball_query_topk(
    cloud: PointCloud, center, radius: float, k: int, center_index: int = -1
) -> GroupIndex:
    """The k nearest points to `center` among those within `radius`.

    Members are sorted by distance then index. If fewer than k qualify the
    nearest qualifying point is repeated; if none qualify the globally nearest
    point is used and the group is flagged `empty_ball`.
    """
    if len(cloud) == 0:
        raise ValueError("ball query on an empty cloud")
    if radius <= 0.0 or k < 1:
        raise ValueError(f"radius must be > 0 and k >= 1, got radius={radius}, k={k}")
    d = np.linalg.norm(cloud.points - as_vec3(center), axis=1)
    return _topk_padded(d, d <= radius, k, center_index)
