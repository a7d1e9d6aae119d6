"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery to train small transformers on one CPU: numpy
arrays, a closure-per-op backward graph, and a handful of fused
primitives (softmax, rms_norm, rotary rotation) where composing
elementwise ops would be wasteful. float32 is the training dtype;
gradient-check tests run the same graphs in float64.

Tensors are immutable after creation during the forward pass; gradients
accumulate into `.grad` on `backward()` and stay until `zero_grads`.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def grad_array(self) -> np.ndarray:
        """Gradient buffer, zeros if backward never reached this leaf."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar. Repeated calls accumulate."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # operator sugar; the module-level functions are the real surface
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, backward_fn):
    """Wrap an op result; drops the graph when grads are off/unneeded."""
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = rg
    out._parents = parents if rg else ()
    out._backward = backward_fn if rg else None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.data.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        a._accumulate(g * s)

    return _result(a.data * s, (a,), bw)


def add_const(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accumulate(g)

    return _result(a.data + c, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(g * (2.0 * a.data))

    return _result(a.data * a.data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * (0.5 / out_data))

    return _result(out_data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out_data)

    return _result(out_data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), bw)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def bw(g):
        a._accumulate(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _result(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    return _result(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a._accumulate(g.transpose(inv))

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    parts = tuple(parts)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a._accumulate(buf)

    return _result(np.ascontiguousarray(a.data[idx]), (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy()
                          if np.ndim(g) else np.full_like(a.data, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape))

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]

    def bw(g):
        if axis is None:
            a._accumulate(np.full_like(a.data, g / n))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg / n, a.data.shape))

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _result(out_data, (a, b), bw)


def transpose_last(a: Tensor) -> Tensor:
    """Swap the trailing two axes (view-cheap, BLAS-friendly)."""

    def bw(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _result(np.swapaxes(a.data, -1, -2), (a,), bw)


# ---------------------------------------------------------------------------
# fused primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _result(out_data, (a,), bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.data.shape != x.data.shape[-1:]:
        raise ShapeError(
            f"rms_norm gain extent {gain.data.shape} does not match "
            f"last axis of {x.data.shape}")
    n = x.data.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xh = x.data * inv
    out_data = xh * gain.data

    def bw(g):
        gg = g * gain.data
        if x.requires_grad:
            corr = (gg * xh).sum(axis=-1, keepdims=True) / n
            x._accumulate(inv * (gg - xh * corr))
        if gain.requires_grad:
            gain._accumulate((g * xh).reshape(-1, n).sum(axis=0))

    return _result(out_data, (x, gain), bw)


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup; idx is an int array or scalar."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        table._accumulate(buf)

    return _result(table.data[idx], (table,), bw)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray,
                i1: np.ndarray, i2: np.ndarray) -> Tensor:
    """Per-position plane rotation of paired feature lanes.

    x: [..., seq, head_dim]; cos/sin: [seq, n_pairs] broadcast over the
    leading axes; i1/i2 index the paired lanes within head_dim. Lanes not
    listed pass through unchanged.
    """
    x1 = x.data[..., i1]
    x2 = x.data[..., i2]
    out_data = x.data.copy()
    out_data[..., i1] = x1 * cos - x2 * sin
    out_data[..., i2] = x1 * sin + x2 * cos

    def bw(g):
        buf = g.copy()
        g1 = g[..., i1]
        g2 = g[..., i2]
        buf[..., i1] = g1 * cos + g2 * sin
        buf[..., i2] = -g1 * sin + g2 * cos
        x._accumulate(buf)

    return _result(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# leaf helpers


def param(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
