"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Because nodes are appended in
execution order, the tape is already topologically sorted and the backward
pass is a single reverse sweep.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .. import kernels
from ..errors import ShapeMismatch

_local = threading.local()


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def Parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out, self.parents, self.backward = out, parents, backward


class Tape:
    """Records differentiable operations executed inside its ``with`` block."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out: Tensor, parents: tuple, backward: Callable) -> None:
        self.nodes.append(_Node(out, parents, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list:
        """Gradients of ``target`` with respect to each source (``None`` if unconnected)."""
        grads = {id(target): np.ones_like(target.data) if seed is None else np.asarray(seed, dtype=target.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(s)) for s in sources]


def current_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _result(data, parents, backward) -> Tensor:
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        tape.record(out, parents, backward)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _wrap(a)
        c = a.dtype.type(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    d = x.data
    c = d.dtype.type(_GELU_C)
    k = d.dtype.type(0.044715)
    half = d.dtype.type(0.5)
    t = np.tanh(c * (d + k * d * d * d))
    out = half * d * (1 + t)

    def backward(g):
        dt = (1 - t * t) * c * (1 + 3 * k * d * d)
        return (g * (half * (1 + t) + half * d * dt),)

    return _result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def backward(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ _swap(bd), ad.shape)
        gb = _unbroadcast(_swap(ad) @ g, bd.shape)
        return ga, gb

    return _result(out, (a, b), backward)


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, key, g)
        return (out,)

    return _result(x.data[key], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D table; the gradient scatters back with accumulation."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _result(table.data[idx], (table,), backward)


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- fused ops


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; -inf entries get exactly zero weight."""
    shape = x.shape
    x2 = np.ascontiguousarray(x.data.reshape(-1, shape[-1]))
    y2 = kernels.softmax_rows_fwd(x2)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, shape[-1]), dtype=y2.dtype)
        return (kernels.softmax_rows_bwd(y2, g2).reshape(shape),)

    return _result(y2.reshape(shape), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    shape = x.shape
    d = shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm affine shape {gamma.shape} vs feature dim {d}")
    dt = x.dtype
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    gm = np.ascontiguousarray(gamma.data, dtype=dt)
    bt = np.ascontiguousarray(beta.data, dtype=dt)
    y2, xhat, rstd = kernels.layer_norm_fwd(x2, gm, bt, float(eps))

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d), dtype=dt)
        gx, gg, gb = kernels.layer_norm_bwd(g2, xhat, rstd, gm)
        return gx.reshape(shape), gg, gb

    return _result(y2.reshape(shape), (x, gamma, beta), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean length."""
    d = x.data
    norm = np.sqrt((d * d).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, d.dtype.type(eps))
    y = d / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of rows of ``logits`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, labels]).mean()

    def backward(g):
        p = kernels.softmax_rows_fwd(np.ascontiguousarray(z))
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), backward)


__all__ = [
    "Parameter",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "concat",
    "cross_entropy",
    "current_tape",
    "gelu",
    "getitem",
    "l2_normalize",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "softmax",
    "sub",
    "sum_",
    "take_rows",
    "transpose",
]
