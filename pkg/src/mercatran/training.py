"""Mini-batch training loop with per-epoch checkpoints and exact resume."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArg
from .model import Batch, MercatranModel, ModelConfig, training_loss
from .nn.optim import AdamState, adam_step, clip_grad_norm
from .nn.tensor import Tape

log = logging.getLogger(__name__)

LAST = "last"
BEST = "best"


@dataclass
class TrainResult:
    model: MercatranModel
    losses: list = field(default_factory=list)
    steps: int = 0


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_epoch(model: MercatranModel, examples, state: AdamState) -> float:
    """One pass over ``examples``; returns the example-weighted mean batch loss."""
    cfg = model.config
    names = list(model.params)
    sources = [model.params[n] for n in names]
    total, count = 0.0, 0
    for idx in _batches(len(examples), cfg.batch_size, cfg.seed, state.epoch):
        batch = Batch.from_examples(examples, idx)
        rng = np.random.default_rng([cfg.seed, 1, state.t]) if cfg.dropout > 0 else None
        with Tape() as tape:
            loss = training_loss(batch, model, rng=rng)
        grads = dict(zip(names, tape.gradient(loss, sources)))
        if cfg.max_grad_norm > 0:
            clip_grad_norm(grads, cfg.max_grad_norm)
        adam_step(model.params, grads, state)
        total += loss.item() * len(idx)
        count += len(idx)
    return total / max(count, 1)


def _save(path, model, state, losses, extra):
    meta = dict(extra or {})
    meta.update({"epoch": state.epoch, "t": state.t, "losses": losses})
    model.save(path, meta, state)


def train(examples, config: ModelConfig, epochs: int, out_dir=None, resume: bool = False,
          extra: Optional[dict] = None, on_epoch: Optional[Callable] = None) -> TrainResult:
    """Train for ``epochs`` total epochs.

    With ``out_dir`` the model is checkpointed after every epoch to
    ``last`` and, when the epoch loss improves, ``best``. With
    ``resume`` training continues from ``last`` (parameters, Adam moments,
    step counter and loss log), which reproduces an uninterrupted run exactly.
    """
    if len(examples) < 1:
        raise InvalidArg("training needs at least one example")
    if epochs < 0:
        raise InvalidArg("epochs must be >= 0")
    config.validate()
    model = MercatranModel(config)
    state = AdamState(schedule=config.schedule())
    losses: list = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / LAST).exists():
            model, moments, meta = MercatranModel.load(out / LAST)
            if model.config.to_dict() != config.to_dict():
                raise InvalidArg("checkpoint config differs from the requested config")
            state.m = {k: v.copy() for k, v in moments.get("adam.m", {}).items()}
            state.v = {k: v.copy() for k, v in moments.get("adam.v", {}).items()}
            state.t = int(meta["t"])
            state.epoch = int(meta["epoch"])
            losses = list(meta["losses"])
            log.info(json.dumps({"event": "resume", "epoch": state.epoch, "step": state.t}))
    best = min(losses) if losses else float("inf")
    while state.epoch < epochs:
        loss = train_epoch(model, examples, state)
        state.epoch += 1
        losses.append(loss)
        log.info(json.dumps({"event": "epoch", "epoch": state.epoch, "step": state.t, "loss": loss,
                             "lr": state.lr()}))
        if out is not None:
            _save(out / LAST, model, state, losses, extra)
            if loss < best:
                best = loss
                _save(out / BEST, model, state, losses, extra)
        if on_epoch is not None:
            on_epoch(state.epoch, loss)
    if out is not None and not (out / LAST).exists():
        _save(out / LAST, model, state, losses, extra)
        _save(out / BEST, model, state, losses, extra)
    return TrainResult(model, losses, state.t)
