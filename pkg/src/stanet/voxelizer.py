"""Point clouds to binary BEV pseudo-images, and actor boxes to per-cell targets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from enum import IntEnum
from typing import List, Sequence, Tuple

import numpy as np


class ClassId(IntEnum):
    BACKGROUND = 0
    VEHICLE = 1
    PEDESTRIAN = 2
    BICYCLE = 3
    OTHERS = 4


NUM_CLASSES = len(ClassId)
CLASS_NAMES = ["background", "vehicle", "pedestrian", "bicycle", "others"]

FRAME_RATE_HZ = 20.0
FRAME_DT = 1.0 / FRAME_RATE_HZ
HISTORY_FRAMES = 20
FRAME_STRIDE = 4  # keep one, skip three
KEPT_FRAMES = HISTORY_FRAMES // FRAME_STRIDE
HORIZON = 20


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    """Metric extent and resolution of the voxel grid (half-open ranges)."""

    x_range: Tuple[float, float] = (-32.0, 32.0)
    y_range: Tuple[float, float] = (-32.0, 32.0)
    z_range: Tuple[float, float] = (-2.0, 3.2)
    resolution: Tuple[float, float, float] = (0.25, 0.25, 0.4)

    def __post_init__(self):
        for name, rng, res in zip(("x", "y", "z"), self.ranges, self.resolution):
            if not rng[1] > rng[0] or res <= 0:
                raise ValueError(f"{name}: range {rng} / resolution {res} must be positive")
            n = (rng[1] - rng[0]) / res
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"{name}: extent {rng[1] - rng[0]} not divisible by {res}")

    @property
    def ranges(self):
        return (self.x_range, self.y_range, self.z_range)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(round((r[1] - r[0]) / s)) for r, s in zip(self.ranges, self.resolution))

    @property
    def H(self) -> int:
        return self.shape[0]

    @property
    def W(self) -> int:
        return self.shape[1]

    @property
    def Z(self) -> int:
        return self.shape[2]

    @property
    def lower(self) -> np.ndarray:
        return np.array([r[0] for r in self.ranges])

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) metric BEV centers; axis 0 follows x, axis 1 follows y."""
        cx = self.x_range[0] + (np.arange(self.H) + 0.5) * self.resolution[0]
        cy = self.y_range[0] + (np.arange(self.W) + 0.5) * self.resolution[1]
        gx, gy = np.meshgrid(cx, cy, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        unknown = set(d) - {"x_range", "y_range", "z_range", "resolution"}
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**{k: tuple(float(x) for x in v) for k, v in d.items()})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DESK_GRID = GridConfig(x_range=(-8.0, 8.0), y_range=(-8.0, 8.0))


def voxelize_frame(points, cfg: GridConfig) -> np.ndarray:
    """Binary occupancy grid (H, W, Z) as uint8; points outside the FOV are dropped."""
    grid = np.zeros(cfg.shape, dtype=np.uint8)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return grid
    idx = np.floor((pts - cfg.lower) / np.asarray(cfg.resolution)).astype(np.int64)
    upper = np.array([r[1] for r in cfg.ranges])
    keep = np.all((pts >= cfg.lower) & (pts < upper), axis=1)
    keep &= np.all((idx >= 0) & (idx < np.array(cfg.shape)), axis=1)
    idx = idx[keep]
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return grid


@dataclass
class Targets:
    class_target: np.ndarray     # (H, W) int64
    state_target: np.ndarray     # (H, W) uint8, 1 = static
    motion_target: np.ndarray    # (HORIZON, H, W, 2) float32 metres
    valid_mask: np.ndarray       # (H, W) bool
    instance_target: np.ndarray  # (H, W) int32, 0 = no actor, else actor id + 1
    speed_target: np.ndarray     # (H, W) float32 m/s


@dataclass
class VoxelClip:
    """One sample: five pseudo-images (oldest first) plus keyframe targets."""

    frames: np.ndarray  # (KEPT_FRAMES, H, W, Z) uint8
    class_target: np.ndarray
    state_target: np.ndarray
    motion_target: np.ndarray
    valid_mask: np.ndarray
    instance_target: np.ndarray
    speed_target: np.ndarray
    scene_id: int = -1
    keyframe: int = -1

    def check_invariants(self) -> None:
        if not np.isin(self.frames, (0, 1)).all():
            raise AssertionError("frames must be binary")
        quiet = (self.class_target == ClassId.BACKGROUND) | (self.state_target == 1)
        if np.any(self.motion_target[:, quiet] != 0):
            raise AssertionError("background/static cells carry nonzero motion targets")


def _rotation(theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def footprint_mask(centers: np.ndarray, pose: Sequence[float], length: float, width: float) -> np.ndarray:
    """Cells whose center lies in the half-open box [-l/2, l/2) x [-w/2, w/2) in actor frame."""
    x, y, h = pose
    d = centers - np.array([x, y])
    c, s = np.cos(h), np.sin(h)
    lx = d[..., 0] * c + d[..., 1] * s
    ly = -d[..., 0] * s + d[..., 1] * c
    return (lx >= -length / 2) & (lx < length / 2) & (ly >= -width / 2) & (ly < width / 2)


def rasterize_targets(actors: Sequence, keyframe: int, cfg: GridConfig, horizon: int = HORIZON,
                      keyframe_points=None) -> Targets:
    """Label every BEV cell from the actor boxes at ``keyframe``.

    Overlaps resolve to the smaller footprint, then the lower actor id; this is
    implemented by painting larger/higher-id actors first.
    """
    H, W = cfg.H, cfg.W
    centers = cfg.cell_centers()
    cls = np.zeros((H, W), dtype=np.int64)
    state = np.ones((H, W), dtype=np.uint8)
    motion = np.zeros((horizon, H, W, 2), dtype=np.float32)
    inst = np.zeros((H, W), dtype=np.int32)
    speed = np.zeros((H, W), dtype=np.float32)

    order = sorted(actors, key=lambda a: (a.length * a.width, a.id), reverse=True)
    for a in order:
        if keyframe + horizon >= len(a.poses):
            raise ValueError(f"actor {a.id} trajectory too short for keyframe {keyframe}")
        p0 = a.poses[keyframe]
        mask = footprint_mask(centers, p0, a.length, a.width)
        if not mask.any():
            continue
        window = a.speeds[keyframe:keyframe + horizon + 1]
        is_static = bool(np.all(window == 0))
        cls[mask] = int(a.cls)
        inst[mask] = a.id + 1
        state[mask] = 1 if is_static else 0
        speed[mask] = float(np.mean(window))
        if is_static:
            motion[:, mask] = 0.0
            continue
        rel = centers[mask] - p0[:2]
        for t in range(1, horizon + 1):
            pt = a.poses[keyframe + t]
            turn = _rotation(pt[2] - p0[2]) - np.eye(2)
            motion[t - 1, mask] = (pt[:2] - p0[:2]) + rel @ turn.T

    if keyframe_points is not None:
        valid = voxelize_frame(keyframe_points, cfg).any(axis=-1)
    else:
        valid = np.zeros((H, W), dtype=bool)
    return Targets(cls, state, motion, valid, inst, speed)


def select_history(history: Sequence) -> List:
    """Pick the kept frames (stride 4 back from the newest), oldest first."""
    if len(history) < HISTORY_FRAMES:
        raise InsufficientHistoryError(
            f"need {HISTORY_FRAMES} history frames, got {len(history)}")
    history = list(history)[-HISTORY_FRAMES:]
    return [history[i] for i in range(FRAME_STRIDE - 1, HISTORY_FRAMES, FRAME_STRIDE)]


def build_clip(history: Sequence, actors: Sequence, keyframe: int, cfg: GridConfig,
               scene_id: int = -1) -> VoxelClip:
    """Assemble a clip from the 20 newest point clouds (keyframe last)."""
    kept = select_history(history)
    frames = np.stack([voxelize_frame(p, cfg) for p in kept])
    t = rasterize_targets(actors, keyframe, cfg, keyframe_points=kept[-1])
    return VoxelClip(frames, t.class_target, t.state_target, t.motion_target, t.valid_mask,
                     t.instance_target, t.speed_target, scene_id=scene_id, keyframe=keyframe)


def collate(clips: Sequence[VoxelClip]) -> dict:
    """Stack clips into batched arrays keyed by field name."""
    keys = ("frames", "class_target", "state_target", "motion_target", "valid_mask",
            "instance_target", "speed_target")
    return {k: np.stack([getattr(c, k) for c in clips]) for k in keys}
