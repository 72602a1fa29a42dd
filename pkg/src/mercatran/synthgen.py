"""Deterministic synthetic C2C clickstream corpora with planted brand affinity.

Every random stream is a Philox generator keyed by ``(seed, stream kind,
entity index)``, so an item's or user's draws never depend on how many other
entities were generated before it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .datamodel import EVENT_TYPES, EventRecord, ItemSnapshot
from .errors import InvalidConfig, UnknownUser

_ITEM, _USER, _BRAND, _POPULARITY = 0, 1, 2, 3
_SYLLABLES = (
    "ka", "lo", "mi", "ra", "te", "su", "no", "vi", "da", "pe",
    "zu", "ho", "ri", "ba", "ne", "fo", "gi", "tu", "sa", "we",
)
# disjoint index ranges per namespace keep every generated word unique
_NS_TITLE, _NS_BRAND, _NS_C0, _NS_C1, _NS_C2 = 0, 1_000_000, 2_000_000, 3_000_000, 4_000_000
_START_US = 1_682_899_200_000_000  # 2023-05-01T00:00:00Z
_DAY_US = 86_400_000_000


@dataclass
class GenConfig:
    seed: int = 0
    n_users: int = 1000
    n_items: int = 2000
    n_brands: int = 40
    taxonomy: tuple = (4, 3, 4)  # n_c0, n_c1 per c0, n_c2 per c1
    events_per_user_range: tuple = (12, 40)
    affinity_strength: float = 0.9
    vocab_per_c2: int = 30
    event_type_weights: tuple = (80.0, 10.0, 4.0, 3.0, 2.0, 1.0)
    # probability that an event revisits one of the user's recent items
    revisit_prob: float = 0.3
    revisit_window: int = 8
    events_per_sequence: int = 50
    c2_per_brand: int = 3
    title_len_range: tuple = (3, 5)
    popularity_exponent: float = 0.8

    def __post_init__(self):
        self.taxonomy = tuple(int(x) for x in self.taxonomy)
        self.events_per_user_range = tuple(int(x) for x in self.events_per_user_range)
        self.event_type_weights = tuple(float(x) for x in self.event_type_weights)
        self.title_len_range = tuple(int(x) for x in self.title_len_range)

    @classmethod
    def from_dict(cls, obj: dict) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfig(f"unknown GenConfig fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path) -> "GenConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")
        if min(self.n_users, self.n_items, self.n_brands) < 0:
            raise InvalidConfig("counts must be >= 0")
        if len(self.taxonomy) != 3 or min(self.taxonomy) <= 0:
            raise InvalidConfig("taxonomy needs three positive level sizes")
        lo, hi = self.events_per_user_range
        if lo < 0 or hi < lo:
            raise InvalidConfig("events_per_user_range must satisfy 0 <= min <= max")
        if not 0.0 <= self.affinity_strength <= 1.0:
            raise InvalidConfig("affinity_strength must lie in [0, 1]")
        if not 0.0 <= self.revisit_prob <= 1.0:
            raise InvalidConfig("revisit_prob must lie in [0, 1]")
        w = self.event_type_weights
        if len(w) != len(EVENT_TYPES) or min(w) < 0 or sum(w) <= 0:
            raise InvalidConfig("event_type_weights needs 6 non-negative weights with positive sum")
        if self.vocab_per_c2 <= 0:
            raise InvalidConfig("vocab_per_c2 must be positive")
        if self.n_items > 0 and self.n_brands == 0:
            raise InvalidConfig("items need at least one brand")
        if self.n_users > 0 and hi > 0 and self.n_items == 0:
            raise InvalidConfig("events need at least one item")
        if self.events_per_sequence <= 0 or self.c2_per_brand <= 0 or self.revisit_window <= 0:
            raise InvalidConfig("events_per_sequence, c2_per_brand and revisit_window must be positive")
        tlo, thi = self.title_len_range
        if tlo < 1 or thi < tlo:
            raise InvalidConfig("title_len_range must satisfy 1 <= min <= max")


def _rng(seed: int, kind: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, kind, index])))


def _word(n: int) -> str:
    syl = []
    while True:
        n, r = divmod(n, len(_SYLLABLES))
        syl.append(_SYLLABLES[r])
        if n == 0 and len(syl) >= 2:
            break
    return "".join(reversed(syl))


def user_id_of(index: int) -> str:
    return f"u{index:07d}"


def item_id_of(index: int) -> str:
    return f"i{index:07d}"


@dataclass
class _Taxonomy:
    c0: list = field(default_factory=list)  # (id, name)
    c1: list = field(default_factory=list)  # (id, name, c0 index)
    c2: list = field(default_factory=list)  # (id, name, c1 index)


def _build_taxonomy(cfg: GenConfig) -> _Taxonomy:
    n0, n1, n2 = cfg.taxonomy
    tax = _Taxonomy()
    for a in range(n0):
        tax.c0.append((a + 1, _word(_NS_C0 + a).capitalize()))
        for b in range(n1):
            i1 = len(tax.c1)
            tax.c1.append((100 + i1, _word(_NS_C1 + i1).capitalize(), a))
            for _ in range(n2):
                i2 = len(tax.c2)
                tax.c2.append((1000 + i2, _word(_NS_C2 + i2).capitalize(), i1))
    return tax


def _brand_leaves(cfg: GenConfig, n_leaves: int) -> list:
    out = []
    k = min(cfg.c2_per_brand, n_leaves)
    for b in range(cfg.n_brands):
        rng = _rng(cfg.seed, _BRAND, b)
        out.append(sorted(int(x) for x in rng.choice(n_leaves, size=k, replace=False)))
    return out


def brand_name_of(b: int) -> str:
    return _word(_NS_BRAND + b).capitalize()


def _make_items(cfg: GenConfig, tax: _Taxonomy) -> list:
    leaves = _brand_leaves(cfg, len(tax.c2))
    items = []
    tlo, thi = cfg.title_len_range
    for i in range(cfg.n_items):
        rng = _rng(cfg.seed, _ITEM, i)
        b = i % cfg.n_brands
        leaf = leaves[b][int(rng.integers(len(leaves[b])))]
        c2_id, c2_name, i1 = tax.c2[leaf]
        c1_id, c1_name, i0 = tax.c1[i1]
        c0_id, c0_name = tax.c0[i0]
        n_words = int(rng.integers(tlo, thi + 1))
        pool = rng.choice(cfg.vocab_per_c2, size=min(n_words, cfg.vocab_per_c2), replace=False)
        words = [_word(_NS_TITLE + leaf * cfg.vocab_per_c2 + int(j)) for j in pool]
        brand = brand_name_of(b)
        price = round(float(rng.lognormal(3.0, 0.8)), 2)
        has_size = rng.random() < 0.5
        size_id = int(rng.integers(1, 60))
        items.append(
            ItemSnapshot(
                item_id=item_id_of(i),
                name=" ".join(words + [brand]),
                brand_id=b + 1,
                brand_name=brand,
                c0_name=c0_name,
                c1_name=c1_name,
                c2_name=c2_name,
                c2_id=c2_id,
                c0_id=c0_id,
                c1_id=c1_id,
                price_usd=price,
                item_condition_id=int(rng.integers(1, 6)),
                size_id=size_id if has_size else None,
                shipper_id=int(rng.integers(0, 2)),
            )
        )
    return items


def _brand_pools(cfg: GenConfig):
    pools = []
    for b in range(cfg.n_brands):
        members = np.arange(b, cfg.n_items, cfg.n_brands)
        # popularity rank is a seeded shuffle so item ids carry no popularity signal
        rank = _rng(cfg.seed, _POPULARITY, b).permutation(len(members))
        w = 1.0 / np.power(rank + 1.0, cfg.popularity_exponent)
        pools.append((members, w / w.sum()))
    return pools


def _user_events(cfg: GenConfig, u: int, items: list, pools: list) -> list:
    rng = _rng(cfg.seed, _USER, u)
    pref = int(rng.integers(cfg.n_brands))
    lo, hi = cfg.events_per_user_range
    n_events = int(rng.integers(lo, hi + 1))
    uid = user_id_of(u)
    weights = np.asarray(cfg.event_type_weights, dtype=np.float64)
    weights = weights / weights.sum()
    t = _START_US + int(rng.integers(0, 30 * _DAY_US))
    session = 0
    history: list[int] = []
    events = []
    for k in range(n_events):
        if rng.random() < 0.1:
            t += int(rng.integers(3_600_000_000, 2 * _DAY_US))
            session += 1
        else:
            t += int(rng.integers(1_000_000, 600_000_000))
        if history and rng.random() < cfg.revisit_prob:
            recent = history[-cfg.revisit_window:]
            idx = recent[int(rng.integers(len(recent)))]
        else:
            if rng.random() < cfg.affinity_strength:
                b = pref
            else:
                b = int(rng.integers(cfg.n_brands))
            members, p = pools[b]
            if len(members) == 0:  # brand without items; fall back to any item
                idx = int(rng.integers(cfg.n_items))
            else:
                idx = int(members[rng.choice(len(members), p=p)])
        history.append(idx)
        etype = EVENT_TYPES[int(rng.choice(len(EVENT_TYPES), p=weights))]
        events.append(
            EventRecord(
                user_id=uid,
                sequence_id=f"{uid}-q{k // cfg.events_per_sequence}",
                stime=t,
                event_type=etype,
                item=items[idx],
                session_id=f"{uid}-s{session}",
            )
        )
    return events


def generate_corpus(config: GenConfig) -> tuple[list, list]:
    """Generate ``(items, events)``; events are ordered by user then time."""
    config.validate()
    tax = _build_taxonomy(config)
    items = _make_items(config, tax)
    events: list = []
    if config.n_users and items:
        pools = _brand_pools(config)
        for u in range(config.n_users):
            events.extend(_user_events(config, u, items, pools))
    return items, events


def _user_index(config: GenConfig, user_id: str) -> Optional[int]:
    if not isinstance(user_id, str) or not user_id.startswith("u") or not user_id[1:].isdigit():
        return None
    idx = int(user_id[1:])
    if idx >= config.n_users or user_id != user_id_of(idx):
        return None
    return idx


def planted_affinity_oracle(config: GenConfig, user_id: str) -> int:
    """The brand_id the generator preferred for ``user_id``."""
    idx = _user_index(config, user_id)
    if idx is None or config.n_brands == 0:
        raise UnknownUser(user_id)
    rng = _rng(config.seed, _USER, idx)
    return int(rng.integers(config.n_brands)) + 1
