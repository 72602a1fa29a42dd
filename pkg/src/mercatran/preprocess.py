"""Cleaning, windowing and tokenization of user sequences.

The pipeline per sequence is: drop consecutive repeats of the same
(event type, item) pair, optionally split into fixed-length segments, then
cut the trailing window of up to 26 events into at most 22 history events and
4 targets. Item content is tokenized with a frequency-capped vocabulary.
"""
from __future__ import annotations

import enum
import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import container
from .datamodel import EventRecord, ItemSnapshot, UserSequence
from .errors import InvalidArg

PAD, UNK, BOS = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<bos>")
VOCAB_LIMIT = 32768
MAX_TOKENS = 32
MAX_HISTORY = 22
FORECAST_STEPS = 4
MIN_SEQUENCE = 10
MIN_HISTORY = MIN_SEQUENCE - FORECAST_STEPS
EXAMPLES_MAGIC = b"MSBR1"

_TOKEN_RE = re.compile(r"[^\W_]+")


class FeatureConfig(str, enum.Enum):
    TITLE_BRAND_CATEGORY = "title_brand_category"
    TITLE_ONLY = "title_only"
    BRAND_CATEGORY = "brand_category"

    def fields(self) -> tuple:
        if self is FeatureConfig.TITLE_ONLY:
            return ("name",)
        if self is FeatureConfig.BRAND_CATEGORY:
            return ("brand_name", "c0_name", "c1_name", "c2_name")
        return ("name", "brand_name", "c0_name", "c1_name", "c2_name")


def tokenize_text(text: str) -> list:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def item_tokens(item: ItemSnapshot, feature_config: FeatureConfig) -> list:
    out = []
    for name in FeatureConfig(feature_config).fields():
        out.extend(tokenize_text(getattr(item, name)))
    return out


@dataclass
class Vocab:
    token_to_id: dict
    limit: int = VOCAB_LIMIT
    feature_config: FeatureConfig = FeatureConfig.TITLE_BRAND_CATEGORY

    def __len__(self):
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def to_dict(self) -> dict:
        return {
            "header": {"version": 1, "feature_config": FeatureConfig(self.feature_config).value, "limit": self.limit},
            "tokens": self.token_to_id,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Vocab":
        head = obj["header"]
        return cls(dict(obj["tokens"]), int(head["limit"]), FeatureConfig(head["feature_config"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, indent=1, sort_keys=False)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_vocab(items: Iterable[ItemSnapshot], feature_config=FeatureConfig.TITLE_BRAND_CATEGORY,
                limit: int = VOCAB_LIMIT) -> Vocab:
    """Keep the ``limit - 3`` most frequent tokens; ties go to the lexicographically smaller token."""
    if limit <= len(RESERVED):
        raise InvalidArg("vocab limit must exceed the 3 reserved ids")
    feature_config = FeatureConfig(feature_config)
    counts: Counter = Counter()
    for item in items:
        counts.update(item_tokens(item, feature_config))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: limit - len(RESERVED)]
    table = {tok: i for i, tok in enumerate(RESERVED)}
    for tok, _ in ranked:
        table[tok] = len(table)
    return Vocab(table, limit, feature_config)


@dataclass(frozen=True)
class TokenizedItem:
    token_ids: tuple
    feature_config: FeatureConfig


def tokenize_item(item: ItemSnapshot, vocab: Vocab, feature_config=None, max_tokens: int = MAX_TOKENS) -> TokenizedItem:
    feature_config = FeatureConfig(feature_config or vocab.feature_config)
    ids = [vocab.lookup(t) for t in item_tokens(item, feature_config)][:max_tokens]
    if not ids:
        ids = [UNK]
    return TokenizedItem(tuple(ids), feature_config)


def dedup_consecutive(seq: UserSequence) -> UserSequence:
    """Drop an event when its (event type, item id) pair equals the previous event's."""
    out = []
    prev = None
    for ev in seq.events:
        key = (ev.event_type, ev.item.item_id)
        if key != prev:
            out.append(ev)
        prev = key
    return UserSequence(seq.user_id, seq.sequence_id, out)


def segment_sequence(seq: UserSequence, max_len: int) -> list:
    if max_len < 1:
        raise InvalidArg("max_len must be >= 1")
    return [
        UserSequence(seq.user_id, f"{seq.sequence_id}" if i == 0 else f"{seq.sequence_id}#{i // max_len}",
                     seq.events[i : i + max_len])
        for i in range(0, len(seq.events), max_len)
    ]


@dataclass
class SbrExample:
    user_id: str
    sequence_id: str
    history: list
    targets: list

    def __post_init__(self):
        if not MIN_HISTORY <= len(self.history) <= MAX_HISTORY:
            raise InvalidArg(f"history length {len(self.history)} outside [{MIN_HISTORY}, {MAX_HISTORY}]")
        if len(self.targets) != FORECAST_STEPS:
            raise InvalidArg(f"need exactly {FORECAST_STEPS} targets")


def make_sbr_example(seq: UserSequence) -> Optional[SbrExample]:
    """Window a deduplicated sequence: last <=26 events, the final 4 are targets."""
    n = len(seq.events)
    if n < MIN_SEQUENCE:
        return None
    tail = seq.events[-(MAX_HISTORY + FORECAST_STEPS):]
    return SbrExample(seq.user_id, seq.sequence_id, list(tail[:-FORECAST_STEPS]), list(tail[-FORECAST_STEPS:]))


@dataclass
class ExampleSet:
    """Columnar, tokenized examples ready for the model.

    Item snapshots are stored once per distinct (item_id, tokens, brand, c2)
    row; ``history`` and ``targets`` index into those rows, with -1 padding
    ``history`` on the right.
    """

    item_tokens: np.ndarray  # int32 [rows, max_tokens], PAD-filled
    item_ids: list
    brand_ids: np.ndarray  # int64 [rows]
    c2_ids: np.ndarray  # int64 [rows]
    history: np.ndarray  # int32 [n, max_history]
    history_len: np.ndarray  # int32 [n]
    targets: np.ndarray  # int32 [n, forecast_steps]
    user_ids: list = field(default_factory=list)
    sequence_ids: list = field(default_factory=list)
    feature_config: FeatureConfig = FeatureConfig.TITLE_BRAND_CATEGORY
    vocab_size: int = 0

    def __len__(self):
        return int(self.history.shape[0])

    @property
    def max_tokens(self) -> int:
        return int(self.item_tokens.shape[1])

    def subset(self, idx) -> "ExampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ExampleSet(
            self.item_tokens, self.item_ids, self.brand_ids, self.c2_ids,
            self.history[idx], self.history_len[idx], self.targets[idx],
            [self.user_ids[i] for i in idx] if self.user_ids else [],
            [self.sequence_ids[i] for i in idx] if self.sequence_ids else [],
            self.feature_config, self.vocab_size,
        )

    def history_rows(self, i: int) -> np.ndarray:
        return self.history[i, : self.history_len[i]]

    def save(self, path) -> None:
        manifest = {
            "kind": "sbr_examples",
            "version": 1,
            "feature_config": FeatureConfig(self.feature_config).value,
            "vocab_size": self.vocab_size,
            "item_ids": list(self.item_ids),
            "user_ids": list(self.user_ids),
            "sequence_ids": list(self.sequence_ids),
        }
        arrays = {
            "item_tokens": self.item_tokens.astype(np.int32),
            "brand_ids": self.brand_ids.astype(np.int64),
            "c2_ids": self.c2_ids.astype(np.int64),
            "history": self.history.astype(np.int32),
            "history_len": self.history_len.astype(np.int32),
            "targets": self.targets.astype(np.int32),
        }
        container.write(path, EXAMPLES_MAGIC, manifest, arrays)

    @classmethod
    def load(cls, path) -> "ExampleSet":
        m, a = container.read(path, EXAMPLES_MAGIC)
        return cls(
            a["item_tokens"], m["item_ids"], a["brand_ids"], a["c2_ids"], a["history"], a["history_len"],
            a["targets"], m["user_ids"], m["sequence_ids"], FeatureConfig(m["feature_config"]), m["vocab_size"],
        )


class _RowTable:
    def __init__(self, vocab, feature_config, max_tokens):
        self.vocab, self.fc, self.max_tokens = vocab, feature_config, max_tokens
        self.rows: dict = {}
        self.tokens: list = []
        self.item_ids: list = []
        self.brand: list = []
        self.c2: list = []

    def row(self, item: ItemSnapshot) -> int:
        toks = tokenize_item(item, self.vocab, self.fc, self.max_tokens).token_ids
        key = (item.item_id, toks, item.brand_id, item.c2_id)
        r = self.rows.get(key)
        if r is None:
            r = self.rows[key] = len(self.tokens)
            self.tokens.append(toks)
            self.item_ids.append(item.item_id)
            self.brand.append(item.brand_id)
            self.c2.append(item.c2_id)
        return r


def build_example_set(examples: Sequence[SbrExample], vocab: Vocab, feature_config=None,
                      max_tokens: int = MAX_TOKENS) -> ExampleSet:
    fc = FeatureConfig(feature_config or vocab.feature_config)
    table = _RowTable(vocab, fc, max_tokens)
    n = len(examples)
    hist = np.full((n, MAX_HISTORY), -1, dtype=np.int32)
    hlen = np.zeros(n, dtype=np.int32)
    tgt = np.zeros((n, FORECAST_STEPS), dtype=np.int32)
    for i, ex in enumerate(examples):
        for j, ev in enumerate(ex.history):
            hist[i, j] = table.row(ev.item)
        hlen[i] = len(ex.history)
        for j, ev in enumerate(ex.targets):
            tgt[i, j] = table.row(ev.item)
    toks = np.zeros((len(table.tokens), max_tokens), dtype=np.int32)
    for r, t in enumerate(table.tokens):
        toks[r, : len(t)] = t
    return ExampleSet(
        toks, table.item_ids, np.asarray(table.brand, dtype=np.int64), np.asarray(table.c2, dtype=np.int64),
        hist, hlen, tgt, [e.user_id for e in examples], [e.sequence_id for e in examples], fc, len(vocab),
    )


def tokenize_items_array(items: Sequence[ItemSnapshot], vocab: Vocab, feature_config=None,
                         max_tokens: int = MAX_TOKENS) -> np.ndarray:
    """PAD-filled int32 token matrix, one row per item."""
    out = np.zeros((len(items), max_tokens), dtype=np.int32)
    for r, item in enumerate(items):
        t = tokenize_item(item, vocab, feature_config, max_tokens).token_ids
        out[r, : len(t)] = t
    return out


def in_holdout(user_id: str, fraction: float, seed: int = 0) -> bool:
    if fraction <= 0:
        return False
    h = hashlib.blake2b(f"{seed}:{user_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0**64 < fraction


def sequences_to_examples(sequences: Iterable[UserSequence], segment_len: Optional[int] = None) -> list:
    out = []
    for seq in sequences:
        seq = dedup_consecutive(seq)
        parts = segment_sequence(seq, segment_len) if segment_len else [seq]
        for part in parts:
            ex = make_sbr_example(part)
            if ex is not None:
                out.append(ex)
    return out
