"""Deterministic synthetic LiDAR scenes and the VFDS dataset file format.

A scene is a set of box-shaped actors moving on the ground plane with
constant speed and constant turn rate, observed by a stationary sensor at
the origin at 20 Hz. Every point coordinate is a pure function of the scene
spec and seed.

VFDS layout (little-endian)::

    b"VFDS"  u16 version
    grid     9 x f64  (x_lo, x_hi, y_lo, y_hi, z_lo, z_hi, res_x, res_y, res_z)
    hash     16 bytes ascii, grid config hash
    u32      scene count
    scene    u32 id, u32 duration_frames, f64 clutter_density, f64 clutter_extent,
             u64 rng_seed, u32 actor_count
      actor  u32 id, u8 class, f64 length, f64 width, f64 height,
             duration x (f64 x, f64 y, f64 heading), duration x f64 speed
      frame  duration x { u32 count, count x (f32 x, f32 y, f32 z) }
    u32      crc32 of all preceding bytes
"""

from __future__ import annotations

import io
import logging
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from shapely.geometry import Polygon

from .voxelizer import (
    CLASS_NAMES,
    FRAME_DT,
    HISTORY_FRAMES,
    HORIZON,
    ClassId,
    GridConfig,
    VoxelClip,
    build_clip,
)

logger = logging.getLogger(__name__)

MAGIC = b"VFDS"
FORMAT_VERSION = 1
MIN_DURATION = HISTORY_FRAMES + HORIZON
PLACEMENT_FRAME = HISTORY_FRAMES - 1
MAX_SPEED = 20.0

CLASS_HEIGHT = {ClassId.VEHICLE: 1.6, ClassId.PEDESTRIAN: 1.7, ClassId.BICYCLE: 1.4,
                ClassId.OTHERS: 1.0}


class PlacementError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class Actor:
    id: int
    cls: ClassId
    length: float
    width: float
    height: float
    poses: np.ndarray   # (duration, 3) x, y, heading per frame
    speeds: np.ndarray  # (duration,) m/s

    def polygon(self, frame: int) -> Polygon:
        x, y, h = self.poses[frame]
        c, s = np.cos(h), np.sin(h)
        hl, hw = self.length / 2, self.width / 2
        corners = [(x + c * a - s * b, y + s * a + c * b)
                   for a, b in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))]
        return Polygon(corners)


@dataclass
class Scene:
    id: int
    duration_frames: int
    actors: List[Actor]
    clutter_density: float
    clutter_extent: float
    rng_seed: int
    frames: List[np.ndarray] = field(default_factory=list)  # (N, 3) float32 per frame


@dataclass
class SceneDataset:
    grid: GridConfig
    scenes: List[Scene]
    version: int = FORMAT_VERSION


def _class_dict(default):
    return {name: default for name in CLASS_NAMES[1:]}


@dataclass
class SceneSpec:
    """What to put in a scene. Dict keys are class names (vehicle, pedestrian, ...).

    Within each class the first ``round(static_fraction * count)`` actors are
    parked (speed exactly 0); the rest draw a speed from ``speed_range``.
    """

    counts: Dict[str, int] = field(default_factory=lambda: {
        "vehicle": 3, "pedestrian": 2, "bicycle": 1, "others": 2})
    speed_range: Dict[str, Tuple[float, float]] = field(default_factory=lambda: {
        "vehicle": (6.0, 12.0), "pedestrian": (0.5, 2.0), "bicycle": (2.0, 4.5),
        "others": (0.0, 0.0)})
    static_fraction: Dict[str, float] = field(default_factory=lambda: {
        "vehicle": 0.34, "pedestrian": 0.0, "bicycle": 0.0, "others": 1.0})
    dims: Dict[str, Tuple[float, float]] = field(default_factory=lambda: {
        "vehicle": (4.5, 1.9), "pedestrian": (0.6, 0.6), "bicycle": (1.8, 0.6),
        "others": (1.0, 1.0)})
    max_turn_rate: float = 0.2
    duration_frames: int = MIN_DURATION
    half_extent: float = 6.0
    clutter_density: float = 0.3
    clutter_extent: float = 8.0
    points_per_actor: int = 150
    max_retries: int = 200

    def validate(self) -> None:
        known = set(CLASS_NAMES[1:])
        for attr in ("counts", "speed_range", "static_fraction", "dims"):
            extra = set(getattr(self, attr)) - known
            if extra:
                raise ValueError(f"{attr}: unknown classes {sorted(extra)}")
        for name, n in self.counts.items():
            if n < 0:
                raise ValueError(f"negative actor count for {name}")
        for name, (lo, hi) in self.speed_range.items():
            if not 0.0 <= lo <= hi <= MAX_SPEED:
                raise ValueError(f"speed range for {name} must lie in [0, {MAX_SPEED}]")
        if self.duration_frames < MIN_DURATION:
            raise ValueError(f"duration_frames must be >= {MIN_DURATION}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        spec = cls()
        for key, value in d.items():
            if not hasattr(spec, key):
                raise ValueError(f"unknown scene spec key {key!r}")
            current = getattr(spec, key)
            if isinstance(current, dict):
                merged = dict(current)
                merged.update({k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
                value = merged
            setattr(spec, key, value)
        spec.validate()
        return spec


def trajectory(x0: float, y0: float, heading0: float, speed: float, turn_rate: float,
               duration: int, anchor: int = PLACEMENT_FRAME) -> np.ndarray:
    """Exact constant-speed, constant-turn-rate poses, pinned at frame ``anchor``."""
    t = (np.arange(duration) - anchor) * FRAME_DT
    h = heading0 + turn_rate * t
    if turn_rate == 0.0:
        x = x0 + speed * t * np.cos(heading0)
        y = y0 + speed * t * np.sin(heading0)
    else:
        r = speed / turn_rate
        x = x0 + r * (np.sin(h) - np.sin(heading0))
        y = y0 - r * (np.cos(h) - np.cos(heading0))
    return np.stack([x, y, h], axis=1)


def generate_scene(spec: SceneSpec, seed: int, scene_id: int = 0) -> Scene:
    spec.validate()
    rng = np.random.default_rng(seed)
    D = spec.duration_frames
    actors: List[Actor] = []
    placed: List[Tuple[Polygon, Polygon]] = []
    next_id = 0
    for name in CLASS_NAMES[1:]:
        count = int(spec.counts.get(name, 0))
        cls = ClassId[name.upper()]
        n_static = int(round(spec.static_fraction.get(name, 0.0) * count))
        lo, hi = spec.speed_range.get(name, (0.0, 0.0))
        length, width = spec.dims[name]
        for k in range(count):
            static = k < n_static
            speed = 0.0 if static else (lo if lo == hi else float(rng.uniform(lo, hi)))
            turn = 0.0 if static or speed == 0.0 else float(
                rng.uniform(-spec.max_turn_rate, spec.max_turn_rate))
            for _ in range(spec.max_retries):
                x0, y0 = rng.uniform(-spec.half_extent, spec.half_extent, size=2)
                h0 = float(rng.uniform(-np.pi, np.pi))
                poses = trajectory(float(x0), float(y0), h0, speed, turn, D)
                actor = Actor(next_id, cls, float(length), float(width), CLASS_HEIGHT[cls],
                              poses, np.full(D, speed))
                shapes = (actor.polygon(0), actor.polygon(PLACEMENT_FRAME))
                if not any(a.intersects(b) for other in placed for a, b in zip(shapes, other)):
                    break
            else:
                raise PlacementError(f"could not place {name} #{k} without overlap")
            placed.append(shapes)
            actors.append(actor)
            next_id += 1
    scene = Scene(scene_id, D, actors, float(spec.clutter_density), float(spec.clutter_extent),
                  int(seed))
    scene.frames = [sample_lidar(scene, f, spec.points_per_actor, seed) for f in range(D)]
    return scene


def _box_surface(rng: np.random.Generator, n: int, length: float, width: float,
                 height: float) -> np.ndarray:
    """Uniform samples on the top and four sides of a box resting on z=0."""
    areas = np.array([length * width, width * height, width * height,
                      length * height, length * height])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.uniform(size=(2, n))
    hl, hw = length / 2, width / 2
    x = (u - 0.5) * length
    y = (v - 0.5) * width
    z = v * height
    out = np.empty((n, 3))
    top, front, back, left, right = (face == i for i in range(5))
    out[top] = np.stack([x[top], y[top], np.full(top.sum(), height)], 1)
    out[front] = np.stack([np.full(front.sum(), hl), (u[front] - 0.5) * width, z[front]], 1)
    out[back] = np.stack([np.full(back.sum(), -hl), (u[back] - 0.5) * width, z[back]], 1)
    out[left] = np.stack([x[left], np.full(left.sum(), hw), z[left]], 1)
    out[right] = np.stack([x[right], np.full(right.sum(), -hw), z[right]], 1)
    return out


def clutter_count(scene: Scene) -> int:
    return int(round(scene.clutter_density * (2.0 * scene.clutter_extent) ** 2))


def sample_lidar(scene: Scene, frame_index: int, points_per_actor: int, seed: int) -> np.ndarray:
    """Points (N, 3) float32 for one frame.

    Actor surfaces are resampled per frame; ground clutter is a fixed pattern
    per scene, as a stationary sensor sees the same static returns.
    """
    if not 0 <= frame_index < scene.duration_frames:
        raise IndexError(f"frame {frame_index} outside scene of {scene.duration_frames} frames")
    rng = np.random.default_rng([seed, scene.id, frame_index])
    chunks = []
    for a in scene.actors:
        local = _box_surface(rng, points_per_actor, a.length, a.width, a.height)
        x, y, h = a.poses[frame_index]
        c, s = np.cos(h), np.sin(h)
        world = np.empty_like(local)
        world[:, 0] = x + c * local[:, 0] - s * local[:, 1]
        world[:, 1] = y + s * local[:, 0] + c * local[:, 1]
        world[:, 2] = local[:, 2]
        chunks.append(world)
    n_clutter = clutter_count(scene)
    if n_clutter:
        crng = np.random.default_rng([seed, scene.id])
        e = scene.clutter_extent
        xy = crng.uniform(-e, e, size=(n_clutter, 2))
        z = crng.uniform(-0.05, 0.05, size=(n_clutter, 1))
        chunks.append(np.hstack([xy, z]))
    if not chunks:
        return np.zeros((0, 3), dtype=np.float32)
    return np.vstack(chunks).astype(np.float32)


def generate_dataset(spec: SceneSpec, n_scenes: int, seed: int, grid: GridConfig) -> SceneDataset:
    seeds = np.random.SeedSequence(seed).generate_state(max(n_scenes, 1), dtype=np.uint32)
    scenes = [generate_scene(spec, int(seeds[i]), scene_id=i) for i in range(n_scenes)]
    return SceneDataset(grid, scenes)


# -- serialization ----------------------------------------------------------
def encode_dataset(ds: SceneDataset) -> bytes:
    buf = io.BytesIO()
    g = ds.grid
    buf.write(MAGIC)
    buf.write(struct.pack("<H", ds.version))
    buf.write(struct.pack("<9d", *g.x_range, *g.y_range, *g.z_range, *g.resolution))
    buf.write(g.config_hash().encode("ascii"))
    buf.write(struct.pack("<I", len(ds.scenes)))
    for sc in ds.scenes:
        buf.write(struct.pack("<IIddQI", sc.id, sc.duration_frames, sc.clutter_density,
                              sc.clutter_extent, sc.rng_seed, len(sc.actors)))
        for a in sc.actors:
            buf.write(struct.pack("<IBddd", a.id, int(a.cls), a.length, a.width, a.height))
            buf.write(np.ascontiguousarray(a.poses, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(a.speeds, dtype="<f8").tobytes())
        if len(sc.frames) != sc.duration_frames:
            raise DatasetError(f"scene {sc.id} has {len(sc.frames)} frames, expected {sc.duration_frames}")
        for pts in sc.frames:
            buf.write(struct.pack("<I", len(pts)))
            buf.write(np.ascontiguousarray(pts, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetError("truncated dataset file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))


def decode_dataset(data: bytes) -> SceneDataset:
    if len(data) < 4 or data[:4] != MAGIC:
        raise DatasetError("not a VFDS dataset (bad magic)")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise DatasetError(f"dataset format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 8:
        raise DatasetError("truncated dataset file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetError("dataset checksum mismatch (corrupt or truncated file)")
    vals = r.unpack("<9d")
    try:
        grid = GridConfig(vals[0:2], vals[2:4], vals[4:6], vals[6:9])
    except ValueError as exc:
        raise DatasetError(f"invalid grid block: {exc}") from exc
    if r.take(16).decode("ascii", "replace") != grid.config_hash():
        raise DatasetError("grid config hash does not match grid block")
    (n_scenes,) = r.unpack("<I")
    scenes = []
    for _ in range(n_scenes):
        sid, dur, density, extent, seed, n_actors = r.unpack("<IIddQI")
        actors = []
        for _ in range(n_actors):
            aid, cls, length, width, height = r.unpack("<IBddd")
            poses = r.array("<f8", dur * 3).reshape(dur, 3)
            speeds = r.array("<f8", dur)
            actors.append(Actor(aid, ClassId(cls), length, width, height, poses, speeds))
        frames = []
        for _ in range(dur):
            (n,) = r.unpack("<I")
            frames.append(r.array("<f4", 3 * n).reshape(n, 3))
        scenes.append(Scene(sid, dur, actors, density, extent, seed, frames))
    if r.pos != len(body):
        raise DatasetError("trailing bytes after last scene")
    return SceneDataset(grid, scenes, version)


def write_dataset(path: str, ds: SceneDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def read_dataset(path: str) -> SceneDataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


# -- clips --------------------------------------------------------------------
def keyframes(duration_frames: int, stride: int = 10) -> List[int]:
    """Keyframes with a full 20-frame history and 20-frame future."""
    return list(range(HISTORY_FRAMES - 1, duration_frames - HORIZON, stride))


def dataset_to_clips(ds: SceneDataset, cfg: Optional[GridConfig] = None,
                     keyframe_stride: int = 10) -> Iterator[VoxelClip]:
    cfg = cfg or ds.grid
    for sc in ds.scenes:
        if sc.duration_frames < MIN_DURATION:
            logger.warning("scene %d has %d frames (< %d); skipped", sc.id, sc.duration_frames,
                           MIN_DURATION)
            continue
        for k in keyframes(sc.duration_frames, keyframe_stride):
            history = sc.frames[k - HISTORY_FRAMES + 1:k + 1]
            yield build_clip(history, sc.actors, k, cfg, scene_id=sc.id)
