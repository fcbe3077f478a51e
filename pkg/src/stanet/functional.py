"""Network-level differentiable ops built on :mod:`stanet.tensor`.

Layouts are channel-first with a leading batch dim: ``(N, C, H, W)`` for 2-D
convolution and ``(N, C, T, H, W)`` for 3-D. Convolution is cross-correlation
(no kernel flip).
"""

from __future__ import annotations

import itertools
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import DimensionError, Tensor, _sigmoid, as_tensor, make_node

IntOrTuple = Union[int, Sequence[int]]


def _tuple(v: IntOrTuple, n: int) -> Tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def _conv_geometry(x_shape, w_shape, stride, padding):
    nsp = len(w_shape) - 2
    ks = w_shape[2:]
    out_sp = []
    for d in range(nsp):
        padded = x_shape[2 + d] + 2 * padding[d]
        if ks[d] > padded:
            raise DimensionError(f"kernel {ks} larger than padded input {x_shape[2:]}")
        out_sp.append((padded - ks[d]) // stride[d] + 1)
    return ks, tuple(out_sp)


def _window(offset, stride, out_sp):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out_sp))


def convnd(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: IntOrTuple = 1,
           padding: IntOrTuple = 0) -> Tensor:
    """N-d cross-correlation. ``x``: (N, C, *S); ``weight``: (O, C, *K).

    Computed as a sum over kernel offsets of (O, C) @ (C, P) products, which
    keeps memory at one shifted copy of the input and fixes the reduction
    order.
    """
    nsp = weight.ndim - 2
    if x.ndim != nsp + 2:
        raise DimensionError(f"input rank {x.ndim} does not match {nsp}-d kernel")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    stride, padding = _tuple(stride, nsp), _tuple(padding, nsp)
    ks, out_sp = _conv_geometry(x.shape, weight.shape, stride, padding)
    n, c = x.shape[:2]
    o = weight.shape[0]
    npos = int(np.prod(out_sp))
    pad_width = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.data, pad_width) if any(padding) else x.data
    w = weight.data
    # (K, O, C) contiguous per-offset matrices keep matmul on the BLAS path
    wk = np.ascontiguousarray(np.moveaxis(w.reshape(o, c, -1), -1, 0))
    offsets = list(itertools.product(*(range(k) for k in ks)))
    lead = (slice(None), slice(None))

    out = np.zeros((n, o, npos), dtype=np.result_type(x.data, w))
    for i, off in enumerate(offsets):
        patch = np.ascontiguousarray(xp[lead + _window(off, stride, out_sp)]).reshape(n, c, npos)
        out += wk[i] @ patch
    out = out.reshape((n, o) + out_sp)
    if bias is not None:
        out += bias.data.reshape((1, o) + (1,) * nsp)

    def backward(g):
        g2 = g.reshape(n, o, npos)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        if weight.requires_grad:
            gwk = np.zeros_like(wk)
        g2t = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(o, n * npos)
        for i, off in enumerate(offsets):
            win = lead + _window(off, stride, out_sp)
            if weight.requires_grad:
                patch = np.ascontiguousarray(xp[win].transpose(1, 0, *range(2, 2 + nsp)))
                gwk[i] = g2t @ patch.reshape(c, n * npos).T
            if x.requires_grad:
                gxp[win] += (wk[i].T @ g2).reshape((n, c) + out_sp)
        if weight.requires_grad:
            gw = np.moveaxis(gwk, 0, -1).reshape(w.shape)
        if x.requires_grad:
            crop = lead + tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))
            gx = gxp[crop]
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, f"conv{nsp}d")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: IntOrTuple = 1,
           padding: IntOrTuple = 0) -> Tensor:
    """2-D cross-correlation on (N, C, H, W) or unbatched (C, H, W) input."""
    if weight.ndim != 4:
        raise DimensionError("conv2d weight must be (C_out, C_in, kH, kW)")
    if x.ndim == 3:
        return convnd(x.reshape((1,) + x.shape), weight, bias, stride, padding).reshape(
            _unbatched_out(x, weight, stride, padding))
    return convnd(x, weight, bias, stride, padding)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: IntOrTuple = 1,
           padding: IntOrTuple = 0) -> Tensor:
    """3-D cross-correlation on (N, C, T, H, W) or unbatched (C, T, H, W) input."""
    if weight.ndim != 5:
        raise DimensionError("conv3d weight must be (C_out, C_in, kT, kH, kW)")
    if x.ndim == 4:
        return convnd(x.reshape((1,) + x.shape), weight, bias, stride, padding).reshape(
            _unbatched_out(x, weight, stride, padding))
    return convnd(x, weight, bias, stride, padding)


def _unbatched_out(x, weight, stride, padding):
    nsp = weight.ndim - 2
    _, out_sp = _conv_geometry((1,) + x.shape, weight.shape, _tuple(stride, nsp),
                               _tuple(padding, nsp))
    return (weight.shape[0],) + out_sp


def avg_pool2d(x: Tensor, out_size: Union[int, Tuple[int, int]]) -> Tensor:
    """Average non-overlapping blocks of the last two dims down to ``out_size``."""
    oh, ow = _tuple(out_size, 2)
    h, w = x.shape[-2:]
    if h % oh or w % ow:
        raise DimensionError(f"cannot pool {h}x{w} evenly to {oh}x{ow}")
    fh, fw = h // oh, w // ow
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (oh, fh, ow, fw))
    out = blocks.mean(axis=(-3, -1))
    scale = 1.0 / (fh * fw)

    def backward(g):
        gg = np.broadcast_to((g * scale)[..., :, None, :, None], lead + (oh, fh, ow, fw))
        return (gg.reshape(x.shape).copy(),)

    return make_node(out, (x,), backward, "avg_pool2d")


def upsample_nearest(x: Tensor, out_size: Union[int, Tuple[int, int]]) -> Tensor:
    """Replicate each cell of the last two dims to reach ``out_size``."""
    oh, ow = _tuple(out_size, 2)
    h, w = x.shape[-2:]
    if oh % h or ow % w:
        raise DimensionError(f"cannot upsample {h}x{w} to {oh}x{ow} by an integer factor")
    fh, fw = oh // h, ow // w
    lead = x.shape[:-2]
    out = np.broadcast_to(x.data[..., :, None, :, None], lead + (h, fh, w, fw)).reshape(
        lead + (oh, ow))

    def backward(g):
        return (g.reshape(lead + (h, fh, w, fw)).sum(axis=(-3, -1)),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "upsample_nearest")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Normalize channel axis 1 over all other axes.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``r = momentum * r + (1 - momentum) * batch``.
    """
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        m = x.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gb = g.sum(axis=axes)
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                mean_d = dxhat.mean(axis=axes, keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (dxhat - mean_d - xhat * mean_dx) * inv_std.reshape(bshape)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def softmax_last_dim(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


def log_softmax_last_dim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return make_node(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-element cross entropy. ``logits``: (..., K); ``target``: (...) ints."""
    target = np.asarray(target)
    k = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"target shape {target.shape} vs logits {logits.shape}")
    onehot = np.eye(k, dtype=logits.dtype)[target]
    return -(log_softmax_last_dim(logits) * onehot).sum(axis=-1)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Per-element binary cross entropy on logits, stable for large |z|."""
    y = np.asarray(target, dtype=logits.dtype)
    z = logits.data
    out = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        return (g * (_sigmoid(z) - y),)

    return make_node(out, (logits,), backward, "bce_with_logits")


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Per-element Huber-style smooth L1: quadratic below ``beta``, linear above."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    d = pred.data - target
    ad = np.abs(d)
    quad = ad < beta
    out = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)

    def backward(g):
        return (g * np.where(quad, d / beta, np.sign(d)),)

    return make_node(out, (pred,), backward, "smooth_l1")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = x @ weight
    return out + bias if bias is not None else out


__all__ = [
    "avg_pool2d", "batch_norm", "bce_with_logits", "conv2d", "conv3d", "convnd",
    "cross_entropy", "linear", "log_softmax_last_dim", "smooth_l1", "softmax_last_dim",
    "upsample_nearest", "as_tensor",
]
