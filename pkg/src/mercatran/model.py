"""The three-tower sequential recommender.

* item tower: token embeddings mean-pooled over non-PAD positions, then
  position-wise feed-forward blocks (no self-attention), L2-normalized;
* history encoder: transformer encoder over the item-tower vectors of the
  user's past events;
* decoder: causal transformer decoder with cross-attention to the encoder
  memory, emitting one unit vector per future step.

Training compares decoder outputs with item-tower vectors of the true future
items through a symmetric in-batch contrastive loss, one per step.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyHistory, HistoryTooLong, InvalidConfig, NonUnitRows, ShapeMismatch, TokenOutOfRange
from .nn import checkpoint as ckpt
from .nn import tensor as T
from .nn.functional import attention, causal_mask, dropout, key_padding_mask, sinusoidal_positions
from .nn.optim import LRSchedule
from .nn.tensor import Tensor
from .preprocess import PAD, FeatureConfig


@dataclass
class ModelConfig:
    d: int = 64
    d_ff: int = 1024
    h: int = 8
    n_blocks: int = 2
    max_history: int = 22
    forecast_steps: int = 4
    max_tokens: int = 32
    vocab_size: int = 32768
    batch_size: int = 256
    temperature: float = 0.07
    dropout: float = 0.1
    seed: int = 0
    feature_config: str = FeatureConfig.TITLE_BRAND_CATEGORY.value
    # optimizer schedule
    lr_kind: str = "noam"
    lr_factor: float = 1.0
    warmup_steps: int = 4000
    lr_decay_step: int = 25
    lr_decay_gamma: float = 1.0
    max_grad_norm: float = 0.0

    def __post_init__(self):
        self.feature_config = FeatureConfig(self.feature_config).value

    def validate(self) -> None:
        if self.d <= 0 or self.h <= 0 or self.d % self.h:
            raise InvalidConfig(f"d={self.d} must be a positive multiple of h={self.h}")
        if self.forecast_steps < 1:
            raise InvalidConfig("forecast_steps must be >= 1")
        if self.temperature <= 0:
            raise InvalidConfig("temperature must be > 0")
        if self.vocab_size < 3 or self.vocab_size > 32768:
            raise InvalidConfig("vocab_size must lie in [3, 32768]")
        if self.n_blocks < 0 or self.d_ff <= 0 or self.max_history < 1 or self.max_tokens < 1:
            raise InvalidConfig("n_blocks, d_ff, max_history and max_tokens must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr_kind, self.lr_factor, self.d, self.warmup_steps, self.lr_decay_step,
                          self.lr_decay_gamma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise InvalidConfig(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**obj)


def _xavier(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def param_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.d, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "bos": (d,)}

    def ffn(p):
        shapes.update({f"{p}.w1": (d, f), f"{p}.b1": (f,), f"{p}.w2": (f, d), f"{p}.b2": (d,)})

    def ln(p):
        shapes.update({f"{p}.g": (d,), f"{p}.b": (d,)})

    def mha(p):
        # no key bias: it shifts every score in a row equally, so softmax ignores it
        for n in ("q", "k", "v", "o"):
            shapes[f"{p}.w{n}"] = (d, d)
            if n != "k":
                shapes[f"{p}.b{n}"] = (d,)

    for i in range(cfg.n_blocks):
        ffn(f"item.{i}.ffn")
        ln(f"item.{i}.ln")
    for i in range(cfg.n_blocks):
        mha(f"enc.{i}.attn")
        ln(f"enc.{i}.ln1")
        ffn(f"enc.{i}.ffn")
        ln(f"enc.{i}.ln2")
    for i in range(cfg.n_blocks):
        mha(f"dec.{i}.self")
        ln(f"dec.{i}.ln1")
        mha(f"dec.{i}.cross")
        ln(f"dec.{i}.ln2")
        ffn(f"dec.{i}.ffn")
        ln(f"dec.{i}.ln3")
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict:
    rng = np.random.default_rng([cfg.seed, 7])
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "bos"):
            arr = rng.normal(0.0, cfg.d ** -0.5, size=shape)
        elif len(shape) == 2:
            arr = _xavier(rng, *shape)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        out[name] = T.Parameter(arr.astype(dtype))
    return out


class MercatranModel:
    """Parameters plus config; forward passes are methods on this object."""

    def __init__(self, config: ModelConfig, params: Optional[dict] = None, dtype=np.float32):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config, dtype)
        self._pe = sinusoidal_positions(max(config.max_history, config.forecast_steps), config.d, np.float64)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def astype(self, dtype) -> "MercatranModel":
        params = {k: T.Parameter(v.data.astype(dtype)) for k, v in self.params.items()}
        return MercatranModel(self.config, params)

    def copy(self) -> "MercatranModel":
        return self.astype(self.dtype)

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    # ----------------------------------------------------------- blocks

    def _ffn(self, x, p, rng):
        P = self.params
        hdn = T.gelu(T.matmul(x, P[f"{p}.w1"]) + P[f"{p}.b1"])
        return dropout(T.matmul(hdn, P[f"{p}.w2"]) + P[f"{p}.b2"], self.config.dropout, rng)

    def _ln(self, x, p):
        return T.layer_norm(x, self.params[f"{p}.g"], self.params[f"{p}.b"])

    def _mha(self, xq, xkv, p, mask, rng):
        P, h = self.params, self.config.h
        B, Lq, d = xq.shape
        Lk = xkv.shape[1]
        dh = d // h

        def heads(x, n, L):
            y = T.matmul(x, P[f"{p}.w{n}"])
            if n != "k":
                y = y + P[f"{p}.b{n}"]
            return T.transpose(T.reshape(y, (B, L, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(xq, "q", Lq), heads(xkv, "k", Lk), heads(xkv, "v", Lk)
        ctx = attention(q, k, v, mask)  # [B, h, Lq, dh]
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Lq, d))
        return dropout(T.matmul(ctx, P[f"{p}.wo"]) + P[f"{p}.bo"], self.config.dropout, rng)

    def _positions(self, L):
        return Tensor(self._pe[:L].astype(self.dtype))

    # ----------------------------------------------------------- towers

    def item_tower(self, tokens, rng=None) -> Tensor:
        """Unit item vectors [n, d] from a PAD-filled token matrix [n, t]."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeMismatch("item_tower expects a 2-D token matrix")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise TokenOutOfRange(f"token ids must lie in [0, {self.config.vocab_size})")
        n, t = tokens.shape
        real = tokens != PAD
        counts = np.maximum(real.sum(axis=1, keepdims=True), 1)
        weights = (real / counts).astype(self.dtype)[:, None, :]  # [n, 1, t]
        emb = T.take_rows(self.params["tok_emb"], tokens)  # [n, t, d]
        x = T.reshape(T.matmul(Tensor(weights), emb), (n, self.config.d))
        for i in range(self.config.n_blocks):
            x = self._ln(x + self._ffn(x, f"item.{i}.ffn", rng), f"item.{i}.ln")
        return T.l2_normalize(x)

    def encoder(self, item_vecs: Tensor, lengths, rng=None) -> Tensor:
        """Memory [B, L, d] from item vectors [B, L, d]; positions >= length are ignored."""
        B, L, d = item_vecs.shape
        if L > self.config.max_history:
            raise HistoryTooLong(f"history of {L} exceeds {self.config.max_history}")
        mask = key_padding_mask(lengths, L, self.dtype)
        x = item_vecs * math.sqrt(d) + self._positions(L)
        x = dropout(x, self.config.dropout, rng)
        for i in range(self.config.n_blocks):
            x = self._ln(x + self._mha(x, x, f"enc.{i}.attn", mask, rng), f"enc.{i}.ln1")
            x = self._ln(x + self._ffn(x, f"enc.{i}.ffn", rng), f"enc.{i}.ln2")
        return x

    def decoder(self, memory: Tensor, lengths, inputs: Tensor, rng=None) -> Tensor:
        """Unit predictions [B, S, d] for decoder inputs [B, S, d] (BOS first)."""
        B, S, d = inputs.shape
        self_mask = causal_mask(S, self.dtype)
        mem_mask = key_padding_mask(lengths, memory.shape[1], self.dtype)
        x = inputs * math.sqrt(d) + self._positions(S)
        x = dropout(x, self.config.dropout, rng)
        for i in range(self.config.n_blocks):
            x = self._ln(x + self._mha(x, x, f"dec.{i}.self", self_mask, rng), f"dec.{i}.ln1")
            x = self._ln(x + self._mha(x, memory, f"dec.{i}.cross", mem_mask, rng), f"dec.{i}.ln2")
            x = self._ln(x + self._ffn(x, f"dec.{i}.ffn", rng), f"dec.{i}.ln3")
        return T.l2_normalize(x)

    def _bos(self, B) -> Tensor:
        return T.reshape(self.params["bos"], (1, 1, self.config.d)) * Tensor(np.ones((B, 1, 1), dtype=self.dtype))

    def teacher_forced(self, memory: Tensor, lengths, targets: Tensor, rng=None) -> Tensor:
        """Decoder outputs for inputs [BOS, t1 .. t_{S-1}] given targets [B, S, d]."""
        B, S, _ = targets.shape
        inputs = T.concat([self._bos(B), targets[:, : S - 1]], axis=1) if S > 1 else self._bos(B)
        return self.decoder(memory, lengths, inputs, rng)

    def generate(self, memory: Tensor, lengths, steps: Optional[int] = None) -> np.ndarray:
        """Autoregressive query vectors [B, steps, d]; each step feeds back the previous output."""
        steps = steps or self.config.forecast_steps
        B = memory.shape[0]
        inputs = self._bos(B)
        outs = []
        for s in range(steps):
            pred = self.decoder(memory, lengths, inputs)
            last = pred[:, s : s + 1]
            outs.append(last.data[:, 0])
            inputs = T.concat([inputs, last], axis=1)
        return np.stack(outs, axis=1)

    # ----------------------------------------------------------- persistence

    def save(self, path, extra: Optional[dict] = None, optimizer=None) -> None:
        moments = None
        if optimizer is not None:
            moments = {"adam.m": optimizer.m, "adam.v": optimizer.v}
        ckpt.save(path, self.state_arrays(), self.config.to_dict(), extra, moments)

    @classmethod
    def load(cls, path):
        """Return ``(model, moments, extra)``."""
        cfg_dict, params, moments, extra = ckpt.load(path)
        cfg = ModelConfig.from_dict(cfg_dict)
        shapes = param_shapes(cfg)
        ckpt.check_shapes(params, shapes)
        model = cls(cfg, {k: T.Parameter(params[k]) for k in shapes})
        return model, moments, extra


# --------------------------------------------------------------- public ops


def _items_matrix(items: Sequence, max_tokens: int) -> np.ndarray:
    rows = [tuple(getattr(it, "token_ids", it)) for it in items]
    width = max(1, min(max_tokens, max((len(r) for r in rows), default=1)))
    out = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r) > max_tokens:
            raise ShapeMismatch(f"item has {len(r)} tokens, limit is {max_tokens}")
        out[i, : len(r)] = r
    return out


def encode_item(item, model: MercatranModel) -> np.ndarray:
    """Unit vector [d] for one tokenized item."""
    return model.item_tower(_items_matrix([item], model.config.max_tokens)).data[0]


def encode_history(history: Sequence, model: MercatranModel) -> np.ndarray:
    """Encoder memory [len(history), d] for up to ``max_history`` tokenized items."""
    if len(history) == 0:
        raise EmptyHistory("history is empty")
    if len(history) > model.config.max_history:
        raise HistoryTooLong(f"history of {len(history)} exceeds {model.config.max_history}")
    vecs = model.item_tower(_items_matrix(history, model.config.max_tokens))
    return model.encoder(T.reshape(vecs, (1, len(history), model.config.d)), [len(history)]).data[0]


def decode_teacher_forced(memory, target_embeddings, model: MercatranModel) -> np.ndarray:
    """Step predictions [S, d] for one memory [L, d] and S ground-truth target vectors."""
    memory = np.asarray(memory.data if isinstance(memory, Tensor) else memory, dtype=model.dtype)
    targets = np.asarray(target_embeddings.data if isinstance(target_embeddings, Tensor) else target_embeddings,
                         dtype=model.dtype)
    if targets.ndim != 2 or targets.shape[0] != model.config.forecast_steps or targets.shape[1] != model.config.d:
        raise ShapeMismatch(f"expected targets [{model.config.forecast_steps}, {model.config.d}], got {targets.shape}")
    if memory.ndim != 2 or memory.shape[1] != model.config.d:
        raise ShapeMismatch(f"memory must be [L, {model.config.d}]")
    out = model.teacher_forced(Tensor(memory[None]), [memory.shape[0]], Tensor(targets[None]))
    return out.data[0]


def generate_query_vectors(history: Sequence, model: MercatranModel) -> np.ndarray:
    """Four (forecast_steps) unit query vectors [S, d] from a tokenized history."""
    if len(history) == 0:
        raise EmptyHistory("history is empty")
    memory = encode_history(history, model)
    return model.generate(Tensor(memory[None]), [len(history)])[0]


def _check_unit_rows(x: np.ndarray, name: str) -> None:
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise NonUnitRows(f"{name} has rows that are not unit length")


def _step_loss(P: Tensor, Tt: Tensor, tau: float) -> Tensor:
    logits = T.matmul(P, T.transpose(Tt, (1, 0))) * (1.0 / tau)
    labels = np.arange(P.shape[0])
    return (T.cross_entropy(logits, labels) + T.cross_entropy(T.transpose(logits, (1, 0)), labels)) * 0.5


def contrastive_step_loss(P, Tt, tau: float = 0.07) -> Tensor:
    """Symmetric in-batch cross-entropy over cosine similarities / tau."""
    P = P if isinstance(P, Tensor) else Tensor(np.asarray(P))
    Tt = Tt if isinstance(Tt, Tensor) else Tensor(np.asarray(Tt, dtype=P.dtype))
    if P.ndim != 2 or P.shape != Tt.shape or P.shape[0] < 1:
        raise ShapeMismatch(f"P {P.shape} and T {Tt.shape} must be equal [B>=1, d]")
    if tau <= 0:
        raise InvalidConfig("tau must be > 0")
    _check_unit_rows(P.data, "P")
    _check_unit_rows(Tt.data, "T")
    return _step_loss(P, Tt, tau)


@dataclass
class Batch:
    """Model inputs for a set of examples, with item rows deduplicated."""

    tokens: np.ndarray  # [U, t]
    history: np.ndarray  # [B, L] positions into tokens rows (0 where padded)
    lengths: np.ndarray  # [B]
    targets: np.ndarray  # [B, S]

    @classmethod
    def from_examples(cls, ex, idx=None) -> "Batch":
        idx = np.arange(len(ex)) if idx is None else np.asarray(idx)
        hl = ex.history_len[idx]
        L = int(hl.max())
        hist = ex.history[idx, :L]
        tgt = ex.targets[idx]
        valid = hist >= 0
        rows, inverse = np.unique(np.concatenate([hist[valid], tgt.ravel()]), return_inverse=True)
        hpos = np.zeros(hist.shape, dtype=np.int64)
        nv = int(valid.sum())
        hpos[valid] = inverse[:nv]
        tpos = inverse[nv:].reshape(tgt.shape)
        toks = ex.item_tokens[rows]
        width = max(1, int((toks != PAD).sum(axis=1).max()))
        return cls(toks[:, :width], hpos, hl.astype(np.int64), tpos)


def forward_batch(model: MercatranModel, batch: Batch, rng=None):
    """Teacher-forced predictions [B, S, d] and true target vectors [B, S, d]."""
    vecs = model.item_tower(batch.tokens, rng)
    B, L = batch.history.shape
    pad = (np.arange(L)[None, :] < batch.lengths[:, None]).astype(model.dtype)[:, :, None]
    hist = T.take_rows(vecs, batch.history) * Tensor(pad)
    memory = model.encoder(hist, batch.lengths, rng)
    targets = T.take_rows(vecs, batch.targets)
    preds = model.teacher_forced(memory, batch.lengths, targets, rng)
    return preds, targets


def training_loss(examples, model: MercatranModel, idx=None, rng=None) -> Tensor:
    """Mean over forecast steps of the contrastive loss between predictions and true items."""
    batch = examples if isinstance(examples, Batch) else Batch.from_examples(examples, idx)
    preds, targets = forward_batch(model, batch, rng)
    S = model.config.forecast_steps
    total = None
    for s in range(S):
        loss = _step_loss(preds[:, s], targets[:, s], model.config.temperature)
        total = loss if total is None else total + loss
    return total * (1.0 / S)


def item_vectors(model: MercatranModel, tokens: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Item-tower vectors [n, d] for a PAD-filled token matrix, in fixed-size chunks."""
    tokens = np.asarray(tokens, dtype=np.int64)
    out = np.zeros((tokens.shape[0], model.config.d), dtype=model.dtype)
    for s in range(0, tokens.shape[0], batch_size):
        chunk = tokens[s : s + batch_size]
        width = max(1, int((chunk != PAD).sum(axis=1).max()))
        out[s : s + batch_size] = model.item_tower(chunk[:, :width]).data
    return out


def query_vectors(model: MercatranModel, examples, batch_size: int = 256) -> np.ndarray:
    """Autoregressive query vectors [n, S, d] for every example's history."""
    n = len(examples)
    out = np.zeros((n, model.config.forecast_steps, model.config.d), dtype=model.dtype)
    for s in range(0, n, batch_size):
        idx = np.arange(s, min(n, s + batch_size))
        batch = Batch.from_examples(examples, idx)
        vecs = model.item_tower(batch.tokens)
        L = batch.history.shape[1]
        pad = (np.arange(L)[None, :] < batch.lengths[:, None]).astype(model.dtype)[:, :, None]
        memory = model.encoder(T.take_rows(vecs, batch.history) * Tensor(pad), batch.lengths)
        out[idx] = model.generate(memory, batch.lengths)
    return out
