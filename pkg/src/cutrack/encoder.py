"""Hierarchical point encoder with deformable-group vector attention.

Each stage subsamples centers by farthest point sampling and runs an
attention block over local groups. A group starts as a fixed-radius ball;
a regression module predicts a per-group scaling/rotation transform that
reshapes the ball into an adaptive receptive field. Relative coordinates
are divided by the ball radius before the transform is applied, so the
identity transform reproduces the default ball exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import MLP, Linear, Parameter, Tensor
from .geometry import GroupIndex, PointCloud, _topk_padded, farthest_point_sample

SCALE_LOG_BOUND = math.log(3.0)


@dataclass(frozen=True)
class DeformParams:
    """Per-group receptive-field transform parameters.

    Scales are bounded to [1/3, 3] and angles to (-pi, pi) by the
    parameterization in :func:`deform_params_from_raw`.
    """

    s_x: float
    s_y: float
    s_z: float
    theta_x: float
    theta_y: float
    theta_z: float

    @classmethod
    def identity(cls) -> "DeformParams":
        return cls(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)

    @property
    def scales(self) -> np.ndarray:
        return np.array([self.s_x, self.s_y, self.s_z])

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.theta_x, self.theta_y, self.theta_z])


@dataclass(frozen=True)
class DeformTransform:
    """The composed 3x3 group transform (scaling times three rotations)."""

    m: np.ndarray

    def __post_init__(self):
        mat = np.asarray(self.m, dtype=np.float64)
        if mat.shape != (3, 3):
            raise ValueError(f"transform must be 3x3, got {mat.shape}")
        object.__setattr__(self, "m", mat)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.m))


@dataclass(frozen=True)
class BlockConfig:
    in_dim: int
    out_dim: int
    k: int
    r: float

    def __post_init__(self):
        if self.k < 1 or self.r <= 0.0:
            raise ValueError(f"block needs k >= 1 and r > 0, got k={self.k}, r={self.r}")


@dataclass(frozen=True)
class EncoderConfig:
    """Stages as (sample_count, BlockConfig) pairs plus the small-MLP width."""

    stages: tuple
    pos_hidden: int = 32

    def __post_init__(self):
        stages = tuple((int(m), bc) for m, bc in self.stages)
        object.__setattr__(self, "stages", stages)
        counts = [m for m, _ in stages]
        if any(a <= b for a, b in zip(counts, counts[1:])):
            raise ValueError(f"stage sample counts must be strictly decreasing, got {counts}")
        for i in range(1, len(stages)):
            prev, cur = stages[i - 1][1], stages[i][1]
            if cur.in_dim != prev.out_dim:
                raise ValueError(
                    f"stage {i} in_dim {cur.in_dim} != stage {i - 1} out_dim {prev.out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.stages[0][1].in_dim

    @property
    def out_dim(self) -> int:
        return self.stages[-1][1].out_dim


def default_encoder_config(in_dim: int = 3) -> EncoderConfig:
    """Toy-scale default: three stages, doubling radius, dims 32/64/128."""
    dims = [32, 64, 128]
    samples = [128, 64, 32]
    radii = [0.3, 0.6, 1.2]
    stages = []
    prev = in_dim
    for m, d, r in zip(samples, dims, radii):
        stages.append((m, BlockConfig(prev, d, 16, r)))
        prev = d
    return EncoderConfig(tuple(stages), pos_hidden=32)


def deform_params_from_raw(raw: Tensor) -> tuple[Tensor, Tensor]:
    """Map raw 6-vector regressions to bounded (scales, angles) tensors.

    Scales are exp of the raw value clamped to +-ln 3; angles are pi * tanh.
    Zero raw input gives the identity transform.
    """
    scales = ag.exp(ag.clamp(ag.slice_last(raw, 0, 3), -SCALE_LOG_BOUND, SCALE_LOG_BOUND))
    angles = ag.scale(ag.tanh(ag.slice_last(raw, 3, 6)), math.pi)
    return scales, angles


def compose_transform(scales: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Numpy-level diag(s) @ Rx @ Ry @ Rz for a single parameter set."""
    rx, ry, rz, _, _, _ = ag._rot_stacks(np.asarray(angles, dtype=np.float64).reshape(1, 3))
    rot = rx[0] @ ry[0] @ rz[0]
    return np.asarray(scales, dtype=np.float64).reshape(3, 1) * rot


def build_transform(p: DeformParams) -> DeformTransform:
    """Compose the transform in the fixed order: scaling, then x, y, z rotations."""
    return DeformTransform(compose_transform(p.scales, p.angles))


def regress_deform(group_feats: Tensor, mlp: MLP) -> DeformParams:
    """Average-pool member rows, regress a raw 6-vector, map to bounded params.

    `group_feats` has one row per member: the member feature concatenated
    with its center-relative coordinates.
    """
    raw = mlp(ag.mean(group_feats, axis=0))
    scales, angles = deform_params_from_raw(raw)
    s = scales.data
    a = angles.data
    return DeformParams(s[0], s[1], s[2], a[0], a[1], a[2])


def deform_group(
    cloud: PointCloud, center_index: int, t: DeformTransform, r: float, k: int
) -> GroupIndex:
    """Gather the k nearest points in the transformed, radius-normalized space.

    Coordinates are taken relative to the center and divided by r before the
    transform; membership requires the transformed norm to be <= 1. Padding
    follows :func:`cutrack.geometry.ball_query_topk`.
    """
    if len(cloud) == 0:
        raise ValueError("deform group on an empty cloud")
    if r <= 0.0 or k < 1:
        raise ValueError(f"need r > 0 and k >= 1, got r={r}, k={k}")
    rel = (cloud.points - cloud.points[center_index]) / r
    norms = np.linalg.norm(rel @ t.m.T, axis=1)
    return _topk_padded(norms, norms <= 1.0, k, center_index)


class PositionEmbed:
    """Two-layer MLP over center-minus-member offsets."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, name: str):
        self.mlp = MLP([3, hidden, dim], rng, name)

    def __call__(self, center, members) -> Tensor:
        members = np.asarray(members, dtype=np.float64).reshape(-1, 3)
        if members.shape[0] == 0:
            raise ValueError("position embedding needs at least one member")
        offsets = np.asarray(center, dtype=np.float64).reshape(3) - members
        return self.embed_offsets(Tensor(offsets))

    def embed_offsets(self, offsets: Tensor) -> Tensor:
        return self.mlp(offsets)

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()


class VectorAttention:
    """Per-channel attention over group members.

    Weights are a softmax over the member axis of phi(wq(q) - wk(k) + pos),
    taken independently per channel; the output sums the weighted value
    features (plus the position embedding).
    """

    def __init__(self, dim: int, rng: np.random.Generator, name: str):
        self.dim = dim
        self.wq = Linear(dim, dim, rng, f"{name}.wq")
        self.wk = Linear(dim, dim, rng, f"{name}.wk")
        self.wv = Linear(dim, dim, rng, f"{name}.wv")
        self.phi = Linear(dim, dim, rng, f"{name}.phi")

    def batched(self, q: Tensor, keys: Tensor, values: Tensor, pos: Tensor) -> Tensor:
        m, k, d = keys.data.shape
        if k == 0:
            raise ValueError("attention group has no members")
        pre = ag.broadcast_add(ag.reshape(self.wq(q), (m, 1, d)), ag.neg(self.wk(keys)))
        logits = self.phi(ag.add(pre, pos))
        weights = ag.softmax(logits, axis=1)
        return ag.sumt(ag.hadamard(weights, ag.add(self.wv(values), pos)), axis=1)

    def __call__(self, q: Tensor, keys: Tensor, values: Tensor, pos: Tensor) -> Tensor:
        k, d = keys.data.shape
        out = self.batched(
            ag.reshape(q, (1, d)),
            ag.reshape(keys, (1, k, d)),
            ag.reshape(values, (1, k, d)),
            ag.reshape(pos, (1, k, d)),
        )
        return ag.reshape(out, (d,))

    def parameters(self) -> list[Parameter]:
        return [p for lin in (self.wq, self.wk, self.wv, self.phi) for p in lin.parameters()]


def _ball_groups(points: np.ndarray, centers_xyz: np.ndarray, r: float, k: int, center_indices) -> np.ndarray:
    d = np.linalg.norm(points[None, :, :] - centers_xyz[:, None, :], axis=2)
    rows = [
        _topk_padded(d[i], d[i] <= r, k, int(center_indices[i])).member_indices
        for i in range(centers_xyz.shape[0])
    ]
    return np.stack(rows)


def _deformed_groups(
    points: np.ndarray, centers_xyz: np.ndarray, transforms: np.ndarray, r: float, k: int, center_indices
) -> np.ndarray:
    rel = (points[None, :, :] - centers_xyz[:, None, :]) / r
    proj = np.einsum("mij,mnj->mni", transforms, rel)
    norms = np.linalg.norm(proj, axis=2)
    rows = [
        _topk_padded(norms[i], norms[i] <= 1.0, k, int(center_indices[i])).member_indices
        for i in range(centers_xyz.shape[0])
    ]
    return np.stack(rows)


class DeformableAttentionBlock:
    """One encoder block: group, deform, attend, project.

    Feature path per center: gather the default ball group, regress the
    group transform from pooled [feature; offset] rows, regather in the
    transformed space, embed member offsets, run vector attention, then add
    a linear residual of the center feature and project to out_dim. When
    `deform_enabled` is False the default ball group is used unchanged.
    """

    def __init__(self, cfg: BlockConfig, pos_hidden: int, rng: np.random.Generator, name: str):
        self.cfg = cfg
        d = cfg.in_dim
        self.deform_mlp = MLP([d + 3, pos_hidden, 6], rng, f"{name}.deform", zero_last=True)
        self.pos_embed = PositionEmbed(d, pos_hidden, rng, f"{name}.pos")
        self.attention = VectorAttention(d, rng, f"{name}.attn")
        self.res_proj = Linear(d, d, rng, f"{name}.res")
        self.out_mlp = MLP([d, cfg.out_dim, cfg.out_dim], rng, f"{name}.out")
        self.deform_enabled = True

    def zero_deform_regression(self):
        for p in self.deform_mlp.parameters():
            p.data[...] = 0.0

    def forward(self, points: np.ndarray, feats: Tensor, center_indices: np.ndarray) -> Tensor:
        n, d = feats.data.shape
        if points.shape[0] != n:
            raise ValueError(f"feature rows {n} != point count {points.shape[0]}")
        if d != self.cfg.in_dim:
            raise ValueError(f"feature dim {d} != block in_dim {self.cfg.in_dim}")
        centers_xyz = points[center_indices]
        m = centers_xyz.shape[0]
        k, r = self.cfg.k, self.cfg.r

        default_idx = _ball_groups(points, centers_xyz, r, k, center_indices)

        if self.deform_enabled:
            member_rel = Tensor(points[default_idx] - centers_xyz[:, None, :])
            group_rows = ag.concat([ag.gather_rows(feats, default_idx), member_rel], axis=2)
            raw = self.deform_mlp(ag.mean(group_rows, axis=1))
            scales, angles = deform_params_from_raw(raw)
            transforms = ag.deform_transform(scales, angles)
            group_idx = _deformed_groups(points, centers_xyz, transforms.data, r, k, center_indices)
            offsets = Tensor(centers_xyz[:, None, :] - points[group_idx])
            pos_in = ag.apply_transform(transforms, offsets)
        else:
            group_idx = default_idx
            pos_in = Tensor(centers_xyz[:, None, :] - points[group_idx])

        pos = self.pos_embed.embed_offsets(pos_in)
        member_feats = ag.gather_rows(feats, group_idx)
        center_feats = ag.gather_rows(feats, np.asarray(center_indices, dtype=np.int64))
        attended = self.attention.batched(center_feats, member_feats, member_feats, pos)
        fused = ag.add(attended, self.res_proj(center_feats))
        return self.out_mlp(fused)

    def parameters(self) -> list[Parameter]:
        params = self.deform_mlp.parameters() + self.pos_embed.parameters()
        params += self.attention.parameters() + self.res_proj.parameters() + self.out_mlp.parameters()
        return params


class StageOutput(NamedTuple):
    points: np.ndarray  # (m, 3) coordinates of this stage's centers
    indices: np.ndarray  # (m,) indices into the encoder's input cloud
    feats: Tensor  # (m, out_dim)


class EncoderResult(NamedTuple):
    stages: list[StageOutput]

    @property
    def points(self) -> np.ndarray:
        return self.stages[-1].points

    @property
    def indices(self) -> np.ndarray:
        return self.stages[-1].indices

    @property
    def feats(self) -> Tensor:
        return self.stages[-1].feats


class DeformableEncoder:
    """Cascaded subsample + attention-block stages over one point cloud."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, name: str = "encoder"):
        self.cfg = cfg
        self.blocks = [
            DeformableAttentionBlock(bc, cfg.pos_hidden, rng, f"{name}.stage{i}")
            for i, (_, bc) in enumerate(cfg.stages)
        ]

    def set_deform_enabled(self, enabled: bool):
        for b in self.blocks:
            b.deform_enabled = enabled

    def forward(self, points: np.ndarray, feats: Tensor) -> EncoderResult:
        points = np.asarray(points, dtype=np.float64)
        cur_points = points
        cur_feats = feats
        global_idx = np.arange(points.shape[0], dtype=np.int64)
        outputs: list[StageOutput] = []
        for si, ((m_s, _), block) in enumerate(zip(self.cfg.stages, self.blocks)):
            if cur_points.shape[0] < m_s:
                raise ValueError(
                    f"stage {si}: insufficient points ({cur_points.shape[0]} < {m_s})"
                )
            centers = farthest_point_sample(PointCloud(cur_points), m_s)
            out_feats = block.forward(cur_points, cur_feats, centers)
            cur_points = cur_points[centers]
            global_idx = global_idx[centers]
            cur_feats = out_feats
            outputs.append(StageOutput(cur_points, global_idx, cur_feats))
        return EncoderResult(outputs)

    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.parameters()]
