"""Dataset-wide evaluation of a trained network."""

from __future__ import annotations

import hashlib
from typing import Optional, Sequence, Union

import numpy as np

from .backbone import STANet
from .metrics import MetricsAccumulator, MetricsReport
from .scenegen import SceneDataset, dataset_to_clips, read_dataset
from .trainer import load_model, predict
from .voxelizer import GridConfig, VoxelClip


class GridMismatchError(ValueError):
    """Checkpoint and dataset were built for different voxel grids."""


def clip_set_hash(clips: Sequence[VoxelClip]) -> str:
    """Digest of the clip identities and inputs, to prove two runs saw the same data."""
    h = hashlib.sha256()
    for c in clips:
        h.update(f"{c.scene_id}:{c.keyframe};".encode())
        h.update(np.ascontiguousarray(c.frames).tobytes())
    return h.hexdigest()[:16]


def check_grid(meta: dict, grid: GridConfig) -> None:
    if meta.get("grid_hash") != grid.config_hash():
        raise GridMismatchError(
            f"checkpoint grid {meta.get('grid')} (hash {meta.get('grid_hash')}) does not match "
            f"dataset grid {grid.to_dict()} (hash {grid.config_hash()}); refusing to evaluate")


def evaluate_clips(net: STANet, clips: Sequence[VoxelClip], threshold: float = 0.5,
                   per_clip: bool = False) -> MetricsReport:
    if not clips:
        raise ValueError("cannot evaluate an empty dataset")
    acc = MetricsAccumulator(net.cfg.num_classes)
    for (cls, _, gated), c in zip(predict(net, clips, threshold), clips):
        acc.add(cls, c.class_target, gated, c.motion_target, c.speed_target,
                clip_id=f"{c.scene_id}:{c.keyframe}" if per_clip else None)
    return acc.report()


def evaluate(checkpoint: Union[str, STANet], dataset: Union[str, SceneDataset],
             threshold: float = 0.5, keyframe_stride: int = 10, per_clip: bool = False,
             meta: Optional[dict] = None) -> MetricsReport:
    """Forward, gate and score every clip of ``dataset``.

    ``checkpoint`` is a path or an already-built network (then pass its ``meta``
    to get the grid check).
    """
    if isinstance(checkpoint, str):
        net, meta = load_model(checkpoint)
    else:
        net = checkpoint
    ds = read_dataset(dataset) if isinstance(dataset, str) else dataset
    if meta is not None:
        check_grid(meta, ds.grid)
    clips = list(dataset_to_clips(ds, keyframe_stride=keyframe_stride))
    return evaluate_clips(net, clips, threshold, per_clip)
