"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], wrt: Tensor, eps: float = 1e-4) -> np.ndarray:
    """d fn() / d wrt by central differences, perturbing ``wrt.data`` in place."""
    grad = np.zeros_like(wrt.data, dtype=np.float64)
    flat = wrt.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(fn().data.sum())
        flat[i] = orig - eps
        minus = float(fn().data.sum())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return float(np.linalg.norm(analytic - numeric))
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> dict:
    """Compare backward of ``sum(fn())`` against finite differences.

    Returns a mapping from input position to relative error. Inputs must be
    float64 leaves with ``requires_grad=True``.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.sum().backward()
    errors = {}
    for i, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        errors[i] = relative_error(analytic, numeric_grad(fn, t, eps))
    return errors
