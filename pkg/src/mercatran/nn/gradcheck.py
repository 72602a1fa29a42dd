"""Finite-difference verification of tape gradients (run in float64)."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tape, Tensor


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _coords(shape, n_samples: Optional[int], rng) -> list:
    size = int(np.prod(shape))
    if n_samples is None or n_samples >= size:
        flat = np.arange(size)
    else:
        flat = np.sort(rng.choice(size, size=n_samples, replace=False))
    return [np.unravel_index(i, shape) for i in flat]


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, n_samples: Optional[int] = None,
               seed: int = 0) -> float:
    """Max relative error between the tape gradient of scalar ``f`` and central differences.

    ``x`` is promoted to float64. With ``n_samples`` only that many randomly
    chosen coordinates are perturbed.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    (g,) = tape.gradient(y, [xt])
    if g is None:
        g = np.zeros_like(base)
    coords = _coords(base.shape, n_samples, np.random.default_rng(seed))
    analytic = np.array([g[c] for c in coords])
    numeric = np.empty(len(coords))
    for k, c in enumerate(coords):
        xp = base.copy()
        xp[c] += h
        xm = base.copy()
        xm[c] -= h
        numeric[k] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * h)
    return _rel_err(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict, h: float = 1e-5,
                      n_samples: Optional[int] = 16, seed: int = 0) -> dict:
    """Per-parameter max relative error for a closure over float64 parameters.

    Parameters are perturbed in place and restored.
    """
    with Tape() as tape:
        loss = loss_fn()
    names = list(params)
    grads = tape.gradient(loss, [params[n] for n in names])
    rng = np.random.default_rng(seed)
    out = {}
    for name, g in zip(names, grads):
        p = params[name]
        if p.data.dtype != np.float64:
            raise TypeError("grad_check_params needs float64 parameters")
        if g is None:
            g = np.zeros_like(p.data)
        coords = _coords(p.shape, n_samples, rng)
        analytic = np.array([g[c] for c in coords])
        numeric = np.empty(len(coords))
        for k, c in enumerate(coords):
            old = p.data[c]
            p.data[c] = old + h
            fp = loss_fn().item()
            p.data[c] = old - h
            fm = loss_fn().item()
            p.data[c] = old
            numeric[k] = (fp - fm) / (2 * h)
        out[name] = _rel_err(analytic, numeric)
    return out
