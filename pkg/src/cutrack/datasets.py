"""Synthetic tracking sequences, the PCF on-disk format, and KITTI readers.

A sequence is a list of frames; each frame holds one point cloud and the
annotated boxes visible in it. Synthetic sequences place one target (always
track id 0) moving with constant velocity plus optional yaw rate and noise,
surrounded by distractor objects and ground clutter.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import BBox3D, PointCloud, wrap_angle
from .model_io import atomic_write_bytes

PCF_MAGIC = b"PCF1"
TARGET_TRACK_ID = 0


@dataclass(frozen=True)
class BoxAnnotation:
    track_id: int
    category: str
    box: BBox3D


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    cloud: PointCloud
    boxes: tuple[BoxAnnotation, ...]


@dataclass(frozen=True)
class Sequence:
    sequence_id: str
    category: str
    frames: tuple[FrameRecord, ...]

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if any(a >= b for a, b in zip(ids, ids[1:])):
            raise ValueError(f"frame ids must be strictly increasing, got {ids}")

    def target_boxes(self) -> list[BBox3D]:
        out = []
        for f in self.frames:
            match = [b.box for b in f.boxes if b.track_id == TARGET_TRACK_ID]
            if not match:
                raise ValueError(f"frame {f.frame_id} has no target annotation")
            out.append(match[0])
        return out


@dataclass(frozen=True)
class CategoryTemplate:
    """Sampling parameters for one object category."""

    extent_mean: tuple[float, float, float]  # (w, h, l) meters
    extent_std: tuple[float, float, float]
    speed_mean: float  # meters per frame, along heading
    speed_std: float
    yaw_rate_std: float  # radians per frame
    shape: str = "box"  # "box" or "cylinder" shell


DEFAULT_CATEGORIES: dict[str, CategoryTemplate] = {
    "car": CategoryTemplate((1.8, 1.6, 4.2), (0.12, 0.08, 0.25), 0.55, 0.22, 0.01, "box"),
    "pedestrian": CategoryTemplate((0.6, 1.75, 0.8), (0.05, 0.1, 0.06), 0.12, 0.05, 0.03, "cylinder"),
    "van": CategoryTemplate((2.0, 2.1, 5.1), (0.12, 0.1, 0.3), 0.5, 0.2, 0.01, "box"),
    "cyclist": CategoryTemplate((0.8, 1.7, 1.8), (0.06, 0.08, 0.12), 0.3, 0.12, 0.02, "box"),
}


@dataclass(frozen=True)
class SynthConfig:
    categories: dict[str, CategoryTemplate] = field(default_factory=lambda: dict(DEFAULT_CATEGORIES))
    n_sequences: int = 10
    frames_per_sequence: int = 20
    surface_density: float = 14.0  # points per square meter of shell
    interior_fraction: float = 0.5  # share of target points drawn inside the body
    point_jitter: float = 0.02  # per-point Gaussian sigma, meters
    motion_noise: float = 0.02  # center perturbation per frame, meters
    yaw_noise: float = 0.005  # yaw perturbation per frame, radians
    distractor_probs: tuple[float, ...] = (0.35, 0.35, 0.2, 0.1)  # P(count = 0, 1, 2, ...)
    distractor_min_dist: float = 1.6  # meters from target center (BEV)
    distractor_max_dist: float = 5.0
    background_density: float = 0.8  # ground points per square meter
    background_margin: float = 8.0  # ground apron around the target path, meters
    dropout: float = 0.1  # per-point drop probability
    max_points_per_object: int = 220
    seed: int = 0

    def __post_init__(self):
        if self.surface_density <= 0 or self.background_density < 0:
            raise ValueError("densities must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if abs(sum(self.distractor_probs) - 1.0) > 1e-9:
            raise ValueError("distractor count probabilities must sum to 1")


def _shell_area(tpl: CategoryTemplate, w: float, h: float, l: float) -> float:
    if tpl.shape == "cylinder":
        return math.pi * min(w, l) * h
    return 2.0 * (w * l + w * h + l * h)


def _sample_shell(rng: np.random.Generator, tpl: CategoryTemplate, w, h, l, n) -> np.ndarray:
    """Points on the object's outer shell, in its canonical frame."""
    if tpl.shape == "cylinder":
        radius = min(w, l) / 2.0
        ang = rng.uniform(0.0, 2.0 * math.pi, n)
        z = rng.uniform(-h / 2.0, h / 2.0, n)
        return np.column_stack([radius * np.cos(ang), radius * np.sin(ang), z])
    # box: pick faces proportionally to area
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(-0.5, 0.5, n)
    pts = np.empty((n, 3))
    half = np.array([l / 2.0, w / 2.0, h / 2.0])
    for f in range(6):
        sel = face == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] = sign * half[axis]
        pts[sel, others[0]] = u[sel] * 2.0 * half[others[0]]
        pts[sel, others[1]] = v[sel] * 2.0 * half[others[1]]
    return pts


def _sample_interior(rng: np.random.Generator, w, h, l, n) -> np.ndarray:
    """Interior mass concentrated toward the body center, clipped to the box."""
    sigma = np.array([l, w, h]) / 4.0
    pts = rng.normal(0.0, 1.0, size=(n, 3)) * sigma
    half = np.array([l / 2.0, w / 2.0, h / 2.0])
    return np.clip(pts, -half, half)


def _object_points(rng: np.random.Generator, tpl: CategoryTemplate, box: BBox3D, cfg: SynthConfig) -> np.ndarray:
    count = min(int(round(_shell_area(tpl, box.w, box.h, box.l) * cfg.surface_density)), cfg.max_points_per_object)
    count = max(count, 8)
    n_int = int(round(count * cfg.interior_fraction))
    local = np.vstack(
        [
            _sample_shell(rng, tpl, box.w, box.h, box.l, count - n_int),
            _sample_interior(rng, box.w, box.h, box.l, n_int),
        ]
    )
    if cfg.point_jitter > 0:
        local = local + rng.normal(0.0, cfg.point_jitter, size=local.shape)
    if cfg.dropout > 0:
        local = local[rng.random(local.shape[0]) >= cfg.dropout]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def _sample_extents(rng: np.random.Generator, tpl: CategoryTemplate) -> tuple[float, float, float]:
    vals = []
    for mean, std in zip(tpl.extent_mean, tpl.extent_std):
        vals.append(max(0.3 * mean, rng.normal(mean, std)))
    return tuple(vals)


@dataclass
class _Mover:
    """Constant-velocity, constant-yaw-rate rigid motion with noise."""

    center: np.ndarray
    yaw: float
    speed: float
    yaw_rate: float

    def step(self, rng: np.random.Generator, cfg: SynthConfig):
        self.yaw = wrap_angle(self.yaw + self.yaw_rate + rng.normal(0.0, cfg.yaw_noise))
        heading = np.array([math.cos(self.yaw), math.sin(self.yaw), 0.0])
        self.center = self.center + self.speed * heading + rng.normal(0.0, cfg.motion_noise, 3)


def _spawn_mover(rng: np.random.Generator, tpl: CategoryTemplate, center: np.ndarray, yaw: float) -> _Mover:
    speed = max(0.0, rng.normal(tpl.speed_mean, tpl.speed_std))
    yaw_rate = rng.normal(0.0, tpl.yaw_rate_std)
    return _Mover(center=center.copy(), yaw=yaw, speed=speed, yaw_rate=yaw_rate)


def gen_synthetic(cfg: SynthConfig) -> list[Sequence]:
    """Generate `cfg.n_sequences` sequences, fully determined by `cfg.seed`."""
    names = sorted(cfg.categories)
    sequences = []
    for si in range(cfg.n_sequences):
        rng = np.random.default_rng([cfg.seed, si])
        category = names[si % len(names)]
        tpl = cfg.categories[category]
        w, h, l = _sample_extents(rng, tpl)
        yaw0 = rng.uniform(-math.pi, math.pi)
        target = _spawn_mover(rng, tpl, np.array([0.0, 0.0, h / 2.0]), yaw0)

        n_dis = int(rng.choice(len(cfg.distractor_probs), p=cfg.distractor_probs))
        distractors = []
        for di in range(n_dis):
            dw, dh, dl = _sample_extents(rng, tpl)
            ang = rng.uniform(0.0, 2.0 * math.pi)
            dist = rng.uniform(cfg.distractor_min_dist, cfg.distractor_max_dist)
            c = target.center + np.array([dist * math.cos(ang), dist * math.sin(ang), (dh - h) / 2.0])
            distractors.append(((dw, dh, dl), _spawn_mover(rng, tpl, c, rng.uniform(-math.pi, math.pi))))

        # ground apron sized to the whole target path
        path_len = target.speed * cfg.frames_per_sequence
        apron = cfg.background_margin + max(l, w)
        gx0 = -apron
        gx1 = path_len + apron
        gw = 2.0 * apron
        n_ground = int((gx1 - gx0) * gw * cfg.background_density)
        heading0 = np.array([math.cos(target.yaw), math.sin(target.yaw), 0.0])
        side0 = np.array([-heading0[1], heading0[0], 0.0])

        frames = []
        for fi in range(cfg.frames_per_sequence):
            target_box = BBox3D(target.center, w, h, l, target.yaw)
            boxes = [BoxAnnotation(TARGET_TRACK_ID, category, target_box)]
            clouds = [_object_points(rng, tpl, target_box, cfg)]
            for di, ((dw, dh, dl), mover) in enumerate(distractors):
                dbox = BBox3D(mover.center, dw, dh, dl, mover.yaw)
                boxes.append(BoxAnnotation(di + 1, category, dbox))
                clouds.append(_object_points(rng, tpl, dbox, cfg))
            if n_ground > 0:
                along = rng.uniform(gx0, gx1, n_ground)
                across = rng.uniform(-gw / 2.0, gw / 2.0, n_ground)
                gz = rng.normal(0.0, 0.02, n_ground)
                ground = along[:, None] * heading0 + across[:, None] * side0
                ground[:, 2] = gz
                clouds.append(ground)
            frames.append(FrameRecord(fi, PointCloud(np.vstack(clouds)), tuple(boxes)))
            target.step(rng, cfg)
            for _, mover in distractors:
                mover.step(rng, cfg)
        sequences.append(Sequence(f"synth-{cfg.seed}-{si:04d}", category, tuple(frames)))
    return sequences


# ---------------------------------------------------------------------------
# PCF directory format: meta.json + frame_%06d.pcf


def write_pcf(sequence: Sequence, path: str):
    os.makedirs(path, exist_ok=True)
    meta = {
        "sequence_id": sequence.sequence_id,
        "category": sequence.category,
        "frames": [
            {
                "frame_id": f.frame_id,
                "boxes": [
                    {
                        "track_id": b.track_id,
                        "category": b.category,
                        "cx": b.box.center[0],
                        "cy": b.box.center[1],
                        "cz": b.box.center[2],
                        "w": b.box.w,
                        "h": b.box.h,
                        "l": b.box.l,
                        "yaw": b.box.yaw,
                    }
                    for b in f.boxes
                ],
            }
            for f in sequence.frames
        ],
    }
    atomic_write_bytes(os.path.join(path, "meta.json"), json.dumps(meta, indent=1).encode("utf-8"))
    for f in sequence.frames:
        pts = np.ascontiguousarray(f.cloud.points, dtype="<f4")
        payload = PCF_MAGIC + struct.pack("<I", pts.shape[0]) + pts.tobytes()
        atomic_write_bytes(os.path.join(path, f"frame_{f.frame_id:06d}.pcf"), payload)


def read_pcf_frame(path: str) -> PointCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != PCF_MAGIC:
        raise ValueError(f"bad magic in {path!r}")
    (count,) = struct.unpack("<I", raw[4:8])
    expected = 8 + 12 * count
    if len(raw) < expected:
        raise ValueError(f"truncated frame file {path!r}: need {expected} bytes, have {len(raw)}")
    if len(raw) > expected:
        raise ValueError(f"point count mismatch in {path!r}: {len(raw) - 8} payload bytes for {count} points")
    pts = np.frombuffer(raw[8:], dtype="<f4").reshape(count, 3).astype(np.float64)
    return PointCloud(pts)


def read_pcf(path: str) -> Sequence:
    meta_path = os.path.join(path, "meta.json")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    frames = []
    for fm in meta["frames"]:
        fid = int(fm["frame_id"])
        cloud = read_pcf_frame(os.path.join(path, f"frame_{fid:06d}.pcf"))
        boxes = tuple(
            BoxAnnotation(
                int(b["track_id"]),
                b["category"],
                BBox3D((b["cx"], b["cy"], b["cz"]), b["w"], b["h"], b["l"], b["yaw"]),
            )
            for b in fm["boxes"]
        )
        frames.append(FrameRecord(fid, cloud, boxes))
    return Sequence(meta["sequence_id"], meta["category"], tuple(frames))


def write_dataset(sequences: list[Sequence], root: str):
    os.makedirs(root, exist_ok=True)
    for seq in sequences:
        write_pcf(seq, os.path.join(root, seq.sequence_id))


def read_dataset(root: str) -> list[Sequence]:
    names = sorted(
        d for d in os.listdir(root) if os.path.isfile(os.path.join(root, d, "meta.json"))
    )
    if not names:
        raise ValueError(f"no sequences found under {root!r}")
    return [read_pcf(os.path.join(root, name)) for name in names]


# ---------------------------------------------------------------------------
# KITTI ingestion (binary velodyne scans + tracking label text)


def kitti_read_velodyne(path: str) -> PointCloud:
    """Parse x, y, z, reflectance float32 quadruples; reflectance is dropped."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % 16 != 0:
        raise ValueError(f"velodyne file length {len(raw)} is not divisible by 16")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(data[:, :3].astype(np.float64))


# Camera-frame labels are mapped into the package convention (x forward,
# y left, z up; box center at the body center):
#   x <- z_cam, y <- -x_cam, z <- -y_cam + h/2, yaw <- -rotation_y - pi/2.
def kitti_parse_label_line(line: str):
    """One tracking-label line -> (frame, track_id, category, BBox3D).

    Returns None for DontCare rows. Raises ValueError naming the column for
    short or non-numeric rows.
    """
    fields = line.split()
    if len(fields) < 17:
        raise ValueError(
            f"label line has {len(fields)} fields, expected at least 17 (column {len(fields)} missing)"
        )
    category = fields[2]
    if category == "DontCare":
        return None

    def col(i: int, caster=float):
        try:
            return caster(fields[i])
        except ValueError:
            raise ValueError(f"non-numeric value {fields[i]!r} in column {i}") from None

    frame = col(0, int)
    track_id = col(1, int)
    h, w, l = col(10), col(11), col(12)
    x, y, z = col(13), col(14), col(15)
    rot_y = col(16)
    box = BBox3D((z, -x, -y + h / 2.0), w, h, l, wrap_angle(-rot_y - math.pi / 2.0))
    return frame, track_id, category, box


def kitti_read_label_file(path: str) -> dict[int, list[BoxAnnotation]]:
    """All non-DontCare annotations grouped by frame index."""
    frames: dict[int, list[BoxAnnotation]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parsed = kitti_parse_label_line(line)
            if parsed is None:
                continue
            frame, track_id, category, box = parsed
            frames.setdefault(frame, []).append(BoxAnnotation(track_id, category, box))
    return frames


def assemble_kitti_sequence(
    label_path: str, velodyne_dir: str, track_id: int, sequence_id: str = "kitti"
) -> Sequence:
    """Build a single-target sequence for one annotated track.

    The chosen track is re-labelled as track 0 (the target); other
    annotations keep ids offset by 1 so they remain distinct.
    """
    per_frame = kitti_read_label_file(label_path)
    frames = []
    category = None
    for frame in sorted(per_frame):
        anns = per_frame[frame]
        target = [a for a in anns if a.track_id == track_id]
        if not target:
            continue
        category = target[0].category
        cloud = kitti_read_velodyne(os.path.join(velodyne_dir, f"{frame:06d}.bin"))
        boxes = [BoxAnnotation(TARGET_TRACK_ID, target[0].category, target[0].box)]
        boxes += [
            BoxAnnotation(a.track_id + 1, a.category, a.box) for a in anns if a.track_id != track_id
        ]
        frames.append(FrameRecord(frame, cloud, tuple(boxes)))
    if not frames:
        raise ValueError(f"track {track_id} not found in {label_path!r}")
    return Sequence(sequence_id, category, tuple(frames))
