"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Primitive coverage is exactly what the encoder and losses need: elementwise
arithmetic with numpy broadcasting, matmul, relu/tanh, abs/exp/log/sqrt,
clamp, concat, row gather, segment reductions, softmax, cumsum, and full
reductions.  Geometry enters the graph as constants; no gradients flow into
coordinates.

Graphs are built eagerly: each op returns a Tensor holding its value, its
parents, and one vector-Jacobian product callback per parent.  ``backward``
walks the graph once in reverse topological order and returns a dict from
parameter tensor to gradient array.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, NumericError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Node of the computation graph: a float64 array plus backward edges."""

    __slots__ = ("value", "parents", "vjps", "requires_grad")

    def __init__(self, value: np.ndarray, parents=(), vjps=(),
                 requires_grad: bool = False):
        self.value = value
        self.parents: tuple[Tensor, ...] = parents
        self.vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = vjps
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the common arithmetic.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    """Wrap data as a leaf tensor; rejects non-finite entries."""
    value = np.asarray(data, dtype=np.float64)
    if not np.isfinite(value).all():
        raise NumericError("tensor data must be finite")
    return Tensor(value, requires_grad=requires_grad)


def constant(data: ArrayLike) -> Tensor:
    return tensor(data, requires_grad=False)


def param(data: ArrayLike) -> Tensor:
    return tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(value: np.ndarray, parents: tuple[Tensor, ...],
          vjps: tuple) -> Tensor:
    track = any(p.requires_grad for p in parents)
    if not track:
        return Tensor(value)
    return Tensor(value, parents, vjps, requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.value * b.value, (a, b),
                 (lambda g: _unbroadcast(g * b.value, a.shape),
                  lambda g: _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2):
        raise ShapeError("matmul supports 1- and 2-D operands only")
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def vjp_a(g):
        if a.value.ndim == 1:
            return (b.value @ g.T).ravel() if b.value.ndim == 2 else g * b.value
        gb = g if g.ndim == 2 else g.reshape(a.value.shape[0], -1)
        bv = b.value if b.value.ndim == 2 else b.value.reshape(-1, 1)
        return gb @ bv.T

    def vjp_b(g):
        if b.value.ndim == 1:
            av = a.value if a.value.ndim == 2 else a.value.reshape(1, -1)
            gv = g if g.ndim >= 1 else np.asarray([g])
            return av.T @ gv
        ga = g if g.ndim == 2 else g.reshape(-1, b.value.shape[1])
        av = a.value if a.value.ndim == 2 else a.value.reshape(1, -1)
        return av.T @ ga

    return _make(value, (a, b), (vjp_a, vjp_b))


# -- elementwise nonlinearities ----------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    keep = a.value > 0
    return _make(np.where(keep, a.value, 0.0), (a,), (lambda g: g * keep,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.value)
    return _make(np.abs(a.value), (a,), (lambda g: g * sign,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.value)
    if not np.isfinite(out).all():
        raise NumericError("exp overflow")
    return _make(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.value <= 0):
        raise NumericError("log requires positive inputs")
    return _make(np.log(a.value), (a,), (lambda g: g / a.value,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.value < 0):
        raise NumericError("sqrt requires nonnegative inputs")
    out = np.sqrt(a.value)
    return _make(out, (a,), (lambda g: g * 0.5 / np.maximum(out, 1e-300),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.value > lo) & (a.value < hi)
    return _make(np.clip(a.value, lo, hi), (a,), (lambda g: g * inside,))


# -- structure ops -----------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in ts], axis=axis)
    sizes = [t.value.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(idx):
        lo, hi = offsets[idx], offsets[idx + 1]

        def vjp(g):
            slicer = [slice(None)] * g.ndim
            slicer[axis] = slice(lo, hi)
            return g[tuple(slicer)]

        return vjp

    return _make(value, tuple(ts), tuple(make_vjp(i) for i in range(len(ts))))


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices accumulate gradient."""
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return out

    return _make(a.value[index], (a,), (vjp,))


def segment_sum(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of a 2-D tensor into ``num_segments`` buckets."""
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError("segment_sum expects a 2-D tensor")
    seg = np.asarray(segment_ids, dtype=np.int64)
    value = np.zeros((num_segments, a.value.shape[1]))
    np.add.at(value, seg, a.value)
    return _make(value, (a,), (lambda g: g[seg],))


def segment_mean(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Mean over each bucket; empty buckets yield zero rows."""
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError("segment_mean expects a 2-D tensor")
    seg = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    denom = np.maximum(counts, 1.0)[:, None]
    value = np.zeros((num_segments, a.value.shape[1]))
    np.add.at(value, seg, a.value)
    value /= denom
    return _make(value, (a,), (lambda g: (g / denom)[seg],))


def segment_max(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Columnwise max over each bucket; empty buckets yield zero rows.

    The gradient routes to the first row attaining the max in each bucket.
    """
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError("segment_max expects a 2-D tensor")
    seg = np.asarray(segment_ids, dtype=np.int64)
    ncols = a.value.shape[1]
    value = np.full((num_segments, ncols), -np.inf)
    np.maximum.at(value, seg, a.value)
    empty = ~np.isfinite(value).all(axis=1)
    value[empty] = 0.0

    rows = np.arange(a.value.shape[0])[:, None]
    is_max = a.value == value[seg]
    rank = np.where(is_max, rows, a.value.shape[0])
    first = np.full((num_segments, ncols), a.value.shape[0], dtype=np.int64)
    np.minimum.at(first, seg, rank)
    keep = is_max & (rows == first[seg])

    return _make(value, (a,), (lambda g: g[seg] * keep,))


# -- reductions and normalizations -------------------------------------------

def reduce_sum(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    value = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return _make(np.asarray(value), (a,), (vjp,))


def reduce_mean(a, axis: Optional[int] = None) -> Tensor:
    a = _as_tensor(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    value = a.value.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy()

    return _make(np.asarray(value), (a,), (vjp,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return _make(out, (a,), (vjp,))


def cumsum(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    value = np.cumsum(a.value, axis=axis)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _make(value, (a,), (vjp,))


def logsumexp(a) -> Tensor:
    """Stable log-sum-exp of a 1-D tensor (the max shift is a constant)."""
    a = _as_tensor(a)
    shift = float(a.value.max())
    return add(log(reduce_sum(exp(sub(a, shift)))), shift)


# -- backward pass ------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss for every reachable requires-grad tensor."""
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.value)}
    for node in reversed(topo):
        g = grads.get(node)
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            acc = grads.get(parent)
            grads[parent] = contrib if acc is None else acc + contrib
    return grads
