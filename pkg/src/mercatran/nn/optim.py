"""Adam with bias correction and the learning-rate schedules used for training."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class LRSchedule:
    """Learning rate as a function of (optimizer step, epoch).

    ``kind="noam"``: ``factor * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)``.
    ``kind="constant"``: ``factor``.
    Either is multiplied by ``gamma ** (epoch // decay_step)``.
    """

    kind: str = "noam"
    factor: float = 1.0
    d_model: int = 64
    warmup: int = 4000
    decay_step: int = 25
    gamma: float = 1.0

    def __call__(self, step: int, epoch: int = 0) -> float:
        step = max(step, 1)
        if self.kind == "noam":
            base = self.factor * self.d_model ** -0.5 * min(step ** -0.5, step * self.warmup ** -1.5)
        elif self.kind == "constant":
            base = self.factor
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        decay = self.gamma ** (epoch // self.decay_step) if self.decay_step > 0 else 1.0
        return base * decay

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    schedule: LRSchedule = field(default_factory=LRSchedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self) -> float:
        return self.schedule(self.t, self.epoch)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One Adam update, in place on each parameter's data.

    Parameters without a gradient (``None`` or missing) still advance the
    shared step counter but are otherwise untouched.
    """
    state.t += 1
    t = state.t
    lr = state.lr()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        dt = p.data.dtype
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        g = g.astype(dt, copy=False)
        m *= dt.type(b1)
        m += dt.type(1.0 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1.0 - b2) * (g * g)
        mhat = m / dt.type(c1)
        vhat = v / dt.type(c2)
        p.data -= dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(state.eps))
    return params, state


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * g.dtype.type(scale)
    return total
