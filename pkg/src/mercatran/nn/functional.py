"""Transformer building blocks on top of the tape tensors."""
from __future__ import annotations

import math
from typing import Optional, Union

import numpy as np

from ..errors import NaNInput, ShapeMismatch
from . import tensor as T
from .tensor import Tensor, as_tensor


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a 2-D tensor, computed with max subtraction."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    if np.isnan(x.data).any():
        raise NaNInput("softmax_rows received NaN")
    return T.softmax(x)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    d = x.shape[-1]
    if not isinstance(gamma, Tensor):  # scalars broadcast over the feature axis
        gamma = Tensor(np.broadcast_to(np.asarray(gamma, dtype=x.dtype), (d,)).copy())
    if not isinstance(beta, Tensor):
        beta = Tensor(np.broadcast_to(np.asarray(beta, dtype=x.dtype), (d,)).copy())
    return T.layer_norm(x, gamma, beta, eps)


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, -inf above it."""
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def key_padding_mask(lengths, max_len: int, dtype=np.float32) -> np.ndarray:
    """Additive mask of shape [B, 1, 1, max_len] hiding positions >= length."""
    lengths = np.asarray(lengths)
    pad = np.arange(max_len)[None, :] >= lengths[:, None]
    m = np.where(pad, -np.inf, 0.0).astype(dtype)
    return m[:, None, None, :]


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(q k^T / sqrt(dk) + mask) v over the last two axes."""
    dk = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, _swap_axes(k.ndim))) * (1.0 / math.sqrt(dk))
    if mask is not None:
        scores = scores + Tensor(mask.astype(scores.dtype, copy=False))
    return T.matmul(T.softmax(scores), v)


def _swap_axes(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def scaled_dot_attention(Q, K, V, mask: Union[None, str, np.ndarray] = None) -> Tensor:
    """Single-head attention for Q [n, dk], K [m, dk], V [m, dv].

    ``mask="causal"`` hides keys after each query position (needs n == m).
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeMismatch("scaled_dot_attention expects 2-D Q, K, V")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ShapeMismatch(f"Q {Q.shape}, K {K.shape}, V {V.shape} do not agree")
    if isinstance(mask, str):
        if mask != "causal":
            raise ValueError(f"unknown mask {mask!r}")
        if Q.shape[0] != K.shape[0]:
            raise ShapeMismatch("causal mask needs self-attention shapes")
        mask = causal_mask(Q.shape[0], Q.dtype)
    return attention(Q, K, V, mask)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = T.matmul(x, w)
    return y + b if b is not None else y


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return T.mul(x, Tensor(keep))


def sinusoidal_positions(n: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)
