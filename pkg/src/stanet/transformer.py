"""Single-head self-attention over feature-map tokens.

``TransformerBlock`` computes ``y = MLP(softmax(Q K^T / sqrt(d_k)) V) + x`` with
``Q, K, V = x W_q, x W_k, x W_v``; there is no normalization layer.
``AttentionModule`` wraps it for feature maps: average-pool to 8x8, flatten
(time, row, col) into tokens, add a learnable positional embedding, attend,
unflatten, upsample back and add the input. Temporal (TAM) and spatial (SAM)
modules are both instances of it.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from . import functional as F
from .nn import Linear, Module, Parameter, glorot_uniform
from .tensor import DimensionError, Tensor, as_tensor, matmul


class TransformerBlock(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, d_hidden: int = None):
        super().__init__()
        d_hidden = d_hidden or 2 * d_model
        self.d_model = d_model
        self.w_q = Parameter(glorot_uniform(rng, (d_model, d_model), d_model, d_model))
        self.w_k = Parameter(glorot_uniform(rng, (d_model, d_model), d_model, d_model))
        self.w_v = Parameter(glorot_uniform(rng, (d_model, d_model), d_model, d_model))
        self.mlp1 = Linear(d_model, d_hidden, rng)
        self.mlp2 = Linear(d_hidden, d_model, rng)

    def mlp(self, h: Tensor) -> Tensor:
        return self.mlp2(self.mlp1(h).relu())

    def forward(self, x: Tensor) -> Tensor:
        return transformer_block(x, self)


def qkv_project(x: Tensor, block: TransformerBlock) -> Tuple[Tensor, Tensor, Tensor]:
    x = as_tensor(x)
    if x.shape[-1] != block.w_q.shape[0]:
        raise DimensionError(f"token width {x.shape[-1]} != d_x {block.w_q.shape[0]}")
    return matmul(x, block.w_q), matmul(x, block.w_k), matmul(x, block.w_v)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    kt = k.permute(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    return F.softmax_last_dim(matmul(q, kt) * (1.0 / np.sqrt(q.shape[-1])))


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two dims (leading dims batch)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    return matmul(attention_weights(q, k), v)


def transformer_block(x: Tensor, block: TransformerBlock) -> Tensor:
    q, k, v = qkv_project(x, block)
    return block.mlp(scaled_attention(q, k, v)) + x


def pooled_extent(size: int, pooled_side: int) -> int:
    return size if size <= pooled_side else pooled_side


class AttentionModule(Module):
    """Attention on a (B, C, T, H, W) feature map; output has the input's shape.

    The positional embedding table is sized for the fixed token count
    ``T * h * w`` where ``h, w`` are the pooled extents.
    """

    def __init__(self, channels: int, temporal: int, height: int, width: int,
                 rng: np.random.Generator, pooled_side: int = 8):
        super().__init__()
        self.pooled_side = pooled_side
        self.in_shape = (channels, temporal, height, width)
        self.ph = pooled_extent(height, pooled_side)
        self.pw = pooled_extent(width, pooled_side)
        if height % self.ph or width % self.pw:
            raise DimensionError(f"{height}x{width} not divisible by pooled side {pooled_side}")
        self.num_tokens = temporal * self.ph * self.pw
        self.pos_embed = Parameter(rng.uniform(-0.02, 0.02, size=(self.num_tokens, channels)))
        self.block = TransformerBlock(channels, rng)

    def tokens(self, x: Tensor) -> Tensor:
        b, c, t, h, w = x.shape
        pooled = F.avg_pool2d(x, (self.ph, self.pw)) if (h, w) != (self.ph, self.pw) else x
        return pooled.reshape(b, c, t * self.ph * self.pw).permute(0, 2, 1)

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.in_shape:
            raise DimensionError(f"attention module built for {self.in_shape}, got {x.shape[1:]}")
        b, c, t, h, w = x.shape
        y = self.block(self.tokens(x) + self.pos_embed)
        y = y.permute(0, 2, 1).reshape(b, c, t, self.ph, self.pw)
        if (h, w) != (self.ph, self.pw):
            y = F.upsample_nearest(y, (h, w))
        return y + x


def attention_module(feature_map: Tensor, module: AttentionModule) -> Tensor:
    """Apply ``module`` to a channels-last (T, H, W, C) map; returns the same layout."""
    fm = as_tensor(feature_map)
    if fm.ndim != 4:
        raise DimensionError("expected a (T, H, W, C) feature map")
    x = fm.permute(3, 0, 1, 2).reshape((1, fm.shape[3]) + fm.shape[:3])
    y = module(x)
    return y.reshape(y.shape[1:]).permute(1, 2, 3, 0)
