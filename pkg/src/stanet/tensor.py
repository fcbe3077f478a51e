"""Dense tensors with reverse-mode differentiation.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to one gradient per parent. ``Tensor.backward`` walks the
graph in reverse topological order and accumulates into ``.grad`` of leaves
created with ``requires_grad=True``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_default_dtype = np.float32
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Run forward ops without recording the graph."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data
    return np.asarray(data, dtype=_default_dtype)


class Tensor:
    """N-dimensional array node in a differentiation graph.

    Args:
        data: array-like values. Floating arrays keep their dtype, anything
            else is converted to the current default dtype.
        requires_grad: whether backward should populate ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None, retain_graph: bool = False) -> None:
        """Populate ``grad`` on every reachable leaf that requires it.

        Gradients accumulate (``+=``) into existing buffers, so repeated
        calls sum contributions. Call ``zero_grad`` between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                # on the graph but no gradient flowed here: report zeros, not None
                if node._backward is None and node.requires_grad and node.grad is None:
                    node.grad = np.zeros_like(node.data)
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None
                node.op = "freed"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


def _check_finite(out: np.ndarray, op: str, inputs: Iterable[np.ndarray]) -> None:
    if np.isfinite(out).all():
        return
    if all(np.isfinite(a).all() for a in inputs):
        raise NonFiniteError(f"{op} produced non-finite values from finite inputs")


def make_node(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a forward result; record ``backward`` only when a parent needs grad."""
    _check_finite(out, op, (p.data for p in parents))
    node = Tensor(out)
    node.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        node.requires_grad = True
        node._parents = tuple(parents)
        node._backward = backward
    return node


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return make_node(a.data ** exponent, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a: Tensor) -> Tensor:
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- reductions -------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


# -- shape ops --------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return make_node(out, (a,), lambda g: (np.transpose(g, inverse),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(f"cannot concat shapes {ref} and {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        out = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return make_node(data, tensors, backward, "concat")


def _is_basic_index(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in index)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(out, copy=True), (a,), backward, "getitem")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``mask`` holds, else ``b``; mask is constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        ga = unbroadcast(np.where(mask, g, 0.0), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.where(mask, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(np.where(mask, a.data, b.data), (a, b), backward, "where")
