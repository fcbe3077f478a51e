"""Six-term multi-task loss.

Terms (each before weighting):

* motion: smooth-L1 between raw predicted and target displacements, averaged
  over (step, xy) per cell, then class-balanced mean over foreground cells.
* cls: class-balanced cross entropy over all cells.
* state: binary cross entropy of the static logit over foreground cells.
* spatial: mean |m_a - m_b| over 4-neighbour cell pairs of the same instance.
* f_temporal: mean |d_{t+1} - d_t| of per-step displacement increments
  ``d_t = m_t - m_{t-1}`` (``m_0 = 0``, the current position) over foreground
  cells.
* b_temporal: the same increment roughness over background cells.

Class weights are inverse frequencies over the batch, normalised so a
perfectly balanced batch gets weight 1, clamped to [0.05, 20] and treated as
constants.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Mapping

import numpy as np

from . import functional as F
from .heads import PredictionBundle
from .tensor import Tensor, concat
from .voxelizer import NUM_CLASSES

TERMS = ("motion", "cls", "state", "spatial", "f_temporal", "b_temporal")


class TrainingFault(FloatingPointError):
    """A loss term became NaN or infinite."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    motion: float = 1.0
    cls: float = 1.0
    state: float = 1.0
    spatial: float = 0.5
    f_temporal: float = 0.5
    b_temporal: float = 0.5

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> "LossWeights":
        unknown = set(d) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LossBreakdown:
    """Weighted terms as scalar tensors; ``total`` is their sum."""

    total: Tensor
    motion: Tensor
    cls: Tensor
    state: Tensor
    spatial: Tensor
    f_temporal: Tensor
    b_temporal: Tensor

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name).item() for name in TERMS + ("total",)}


def class_weights(class_target: np.ndarray, num_classes: int = NUM_CLASSES,
                  lo: float = 0.05, hi: float = 20.0) -> np.ndarray:
    counts = np.bincount(class_target.reshape(-1), minlength=num_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(num_classes)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return np.clip(w, lo, hi) * present


def _masked_mean(values: Tensor, weights: np.ndarray) -> Tensor:
    total = float(weights.sum())
    if total == 0.0:
        return (values * 0.0).sum()
    return (values * weights.astype(values.dtype)).sum() * (1.0 / total)


def increment_roughness(motion: Tensor, mask: np.ndarray) -> Tensor:
    """Mean |d_{t+1} - d_t| over masked cells; ``motion``: (B, T, H, W, 2)."""
    if motion.shape[1] < 2:
        return (motion * 0.0).sum()
    zero = Tensor(np.zeros_like(motion.data[:, :1]))
    anchored = concat([zero, motion], axis=1)
    inc = anchored[:, 1:] - anchored[:, :-1]
    rough = (inc[:, 1:] - inc[:, :-1]).abs()
    weights = np.broadcast_to(mask[:, None, :, :, None], rough.shape)
    return _masked_mean(rough, weights)


def spatial_consistency(motion: Tensor, instance: np.ndarray) -> Tensor:
    """Mean |difference| of motion between 4-neighbour cells sharing an instance id."""
    down = (instance[:, 1:, :] == instance[:, :-1, :]) & (instance[:, 1:, :] > 0)
    right = (instance[:, :, 1:] == instance[:, :, :-1]) & (instance[:, :, 1:] > 0)
    n_pairs = int(down.sum() + right.sum())
    if n_pairs == 0:
        return (motion * 0.0).sum()
    dv = (motion[:, :, 1:, :, :] - motion[:, :, :-1, :, :]).abs()
    dh = (motion[:, :, :, 1:, :] - motion[:, :, :, :-1, :]).abs()
    t2 = motion.shape[1] * motion.shape[4]
    sv = (dv * down[:, None, :, :, None].astype(motion.dtype)).sum()
    sh = (dh * right[:, None, :, :, None].astype(motion.dtype)).sum()
    return (sv + sh) * (1.0 / (n_pairs * t2))


def loss_terms(bundle: PredictionBundle, targets: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    """Unweighted terms. ``targets`` holds batched arrays as produced by ``collate``."""
    motion = bundle.motion_raw
    cls_t = np.asarray(targets["class_target"])
    fg = cls_t != 0
    cw = class_weights(cls_t, bundle.class_logits.shape[-1])
    cell_w = cw[cls_t]

    per_cell = F.smooth_l1(motion, targets["motion_target"]).mean(axis=(1, 4))
    terms = {
        "motion": _masked_mean(per_cell, cell_w * fg),
        "cls": _masked_mean(F.cross_entropy(bundle.class_logits, cls_t), cell_w),
        "state": _masked_mean(F.bce_with_logits(bundle.state_logit, targets["state_target"]),
                              fg.astype(np.float64)),
        "spatial": spatial_consistency(motion, np.asarray(targets["instance_target"])),
        "f_temporal": increment_roughness(motion, fg),
        "b_temporal": increment_roughness(motion, ~fg),
    }
    return terms


def total_loss(bundle: PredictionBundle, targets: Mapping[str, np.ndarray],
               weights: LossWeights = None) -> LossBreakdown:
    weights = weights or LossWeights()
    raw = loss_terms(bundle, targets)
    weighted = {}
    for name in TERMS:
        value = raw[name] * getattr(weights, name)
        v = value.item()
        if not np.isfinite(v):
            raise TrainingFault(name, v)
        weighted[name] = value
    total = weighted["motion"]
    for name in TERMS[1:]:
        total = total + weighted[name]
    return LossBreakdown(total=total, **weighted)
