"""Motion, classification and state heads, plus motion gating."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .nn import Conv, ConvBN, Module
from .tensor import Tensor, _sigmoid


class Head(Module):
    """3x3 conv, batch norm, relu, then a 1x1 conv to ``c_out`` channels."""

    def __init__(self, c_in: int, hidden: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = ConvBN(c_in, hidden, (3, 3), rng, padding=1)
        self.conv2 = Conv(hidden, c_out, (1, 1), rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))


@dataclass
class PredictionBundle:
    """Head outputs, batched: motion (B, T, H, W, 2), logits (B, H, W, C), state (B, H, W)."""

    motion_raw: Tensor
    class_logits: Tensor
    state_logit: Tensor
    motion_gated: Optional[np.ndarray] = None

    def squeeze(self) -> "PredictionBundle":
        """Drop the batch axis of a single-sample bundle."""
        gated = None if self.motion_gated is None else self.motion_gated[0]
        return PredictionBundle(self.motion_raw[0], self.class_logits[0], self.state_logit[0], gated)


class Heads(Module):
    def __init__(self, c_in: int, hidden: int, horizon: int, num_classes: int,
                 rng: np.random.Generator):
        super().__init__()
        self.horizon = horizon
        self.motion = Head(c_in, hidden, 2 * horizon, rng)
        self.cls = Head(c_in, hidden, num_classes, rng)
        self.state = Head(c_in, hidden, 1, rng)

    def forward(self, fused: Tensor) -> PredictionBundle:
        """``fused``: (B, C, H, W) channel-first backbone output."""
        b, _, h, w = fused.shape
        motion = self.motion(fused).reshape(b, self.horizon, 2, h, w).permute(0, 1, 3, 4, 2)
        logits = self.cls(fused).permute(0, 2, 3, 1)
        state = self.state(fused).reshape(b, h, w)
        return PredictionBundle(motion, logits, state)


def gate_mask(class_logits: np.ndarray, state_logit: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """True where motion must be zeroed: predicted background or P(static) >= threshold."""
    background = np.argmax(class_logits, axis=-1) == 0
    static = _sigmoid(np.asarray(state_logit, dtype=np.float64)) >= threshold
    return background | static


def apply_gating(bundle: PredictionBundle, threshold: float = 0.5) -> PredictionBundle:
    mask = gate_mask(bundle.class_logits.data, bundle.state_logit.data, threshold)
    raw = bundle.motion_raw.data
    gated = np.where(mask[..., None, :, :, None], 0.0, raw).astype(raw.dtype)
    return replace(bundle, motion_gated=gated)
