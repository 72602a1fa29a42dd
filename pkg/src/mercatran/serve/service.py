"""Batch precompute jobs and request-time retrieval."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from ..datamodel import EventRecord, ItemSnapshot, UserSequence, event_from_dict, read_items
from ..errors import BadRequest, DimensionMismatch, EmptyHistory, MercatranError, NotReady
from ..index import EmbeddingIndex, IndexedItem, build_index, index_to_bytes, load_index, save_index
from ..model import MercatranModel, encode_item, generate_query_vectors
from ..preprocess import MAX_HISTORY, Vocab, dedup_consecutive, tokenize_item
from ..container import atomic_write_bytes
from .store import FeatureStore, UserVectorCacheEntry, now_micros

log = logging.getLogger(__name__)


def catalog_path(index_path) -> str:
    return f"{index_path}.catalog.json"


def _catalog_entry(item: ItemSnapshot) -> dict:
    return {"name": item.name, "brand_name": item.brand_name, "price": item.price_usd}


def latest_history(events: Sequence[EventRecord]) -> list:
    """Deduplicated, time-ordered events, keeping at most the last ``MAX_HISTORY``."""
    ordered = sorted(events, key=lambda e: e.stime)
    seq = dedup_consecutive(UserSequence("", "", ordered))
    return seq.events[-MAX_HISTORY:]


def query_for_events(events: Sequence[EventRecord], model: MercatranModel, vocab: Vocab) -> np.ndarray:
    """The four query vectors for a raw event history (shared by both serving paths)."""
    hist = latest_history(events)
    if not hist:
        raise EmptyHistory("no events")
    toks = [tokenize_item(e.item, vocab, model.config.feature_config, model.config.max_tokens) for e in hist]
    return generate_query_vectors(toks, model).astype(np.float32)


def precompute_users(events: Iterable[EventRecord], model: MercatranModel, vocab: Vocab, store: FeatureStore) -> int:
    """Recompute cached query vectors for every user with events; returns how many entries changed."""
    by_user: dict = {}
    for ev in events:
        by_user.setdefault(ev.user_id, []).append(ev)
    stamp = now_micros()
    entries = []
    for uid in sorted(by_user):
        try:
            vecs = query_for_events(by_user[uid], model, vocab)
        except MercatranError as exc:
            log.warning(json.dumps({"event": "precompute_skip", "user_id": uid, "error": str(exc)}))
            continue
        entries.append(UserVectorCacheEntry(uid, vecs, stamp, len(by_user[uid])))
    return store.upsert(entries)


def precompute_items(items: Iterable[ItemSnapshot], model: MercatranModel, vocab: Vocab, out=None) -> EmbeddingIndex:
    """Embed every item with the item tower and build (and optionally persist) the index."""
    items = list(items)
    indexed = []
    catalog = {}
    for it in items:
        tok = tokenize_item(it, vocab, model.config.feature_config, model.config.max_tokens)
        indexed.append(IndexedItem(it.item_id, encode_item(tok, model), it.brand_id, it.c2_id))
        catalog[it.item_id] = _catalog_entry(it)
    index = build_index(indexed, d=model.config.d)
    if out is not None:
        save_index(index, out)
        atomic_write_bytes(catalog_path(out), json.dumps(catalog, sort_keys=True).encode("utf-8"))
    return index


def load_catalog(index_path) -> dict:
    p = catalog_path(index_path)
    if not os.path.exists(p):
        return {}
    with open(p, encoding="utf-8") as fh:
        return json.load(fh)


@dataclass(frozen=True)
class Snapshot:
    index: EmbeddingIndex
    version: str
    catalog: dict = field(default_factory=dict)


class RecommendationService:
    """Holds a frozen model, a feature store and a swappable index snapshot."""

    def __init__(self, model: MercatranModel, vocab: Vocab, store: Optional[FeatureStore] = None,
                 model_version: str = "unversioned"):
        self.model = model
        self.vocab = vocab
        self.store = store if store is not None else FeatureStore(None, model.config.forecast_steps, model.config.d)
        self.model_version = model_version
        self._snapshot: Optional[Snapshot] = None
        self._swap_lock = threading.Lock()
        self._counter = itertools.count(1)

    @property
    def index_version(self) -> Optional[str]:
        snap = self._snapshot
        return snap.version if snap is not None else None

    def snapshot(self) -> Snapshot:
        snap = self._snapshot
        if snap is None:
            raise NotReady("no index loaded")
        return snap

    def swap_index(self, index: EmbeddingIndex, catalog: Optional[dict] = None) -> Optional[str]:
        """Install ``index`` atomically; returns the previous version id."""
        if len(index) and index.d != self.model.config.d:
            raise DimensionMismatch(f"index dimension {index.d} != model dimension {self.model.config.d}")
        digest = hashlib.sha256(index_to_bytes(index)).hexdigest()[:12]
        with self._swap_lock:
            prev = self.index_version
            self._snapshot = Snapshot(index, f"{next(self._counter)}-{digest}", dict(catalog or {}))
        return prev

    def reindex(self, items_path) -> str:
        items = read_items(items_path)
        index = precompute_items(items, self.model, self.vocab)
        self.swap_index(index, {it.item_id: _catalog_entry(it) for it in items})
        return self.index_version

    def _results(self, snap: Snapshot, query, k: int, skip: Optional[str] = None) -> list:
        rows, scores = snap.index.search_rows(query, k + (1 if skip is not None else 0))
        out = []
        for r, s in zip(rows, scores):
            iid = snap.index.item_ids[r]
            if iid == skip:
                continue
            meta = snap.catalog.get(iid, {})
            out.append({"item_id": iid, "score": float(s), "name": meta.get("name"),
                        "brand_name": meta.get("brand_name"), "price": meta.get("price")})
        return out[:k]

    def handle_recommend(self, user_id: Optional[str] = None, events: Optional[Sequence] = None, k: int = 20) -> dict:
        if not isinstance(k, int) or k < 1:
            raise BadRequest("k must be a positive integer")
        snap = self.snapshot()
        cache_hit = False
        if events:
            parsed = [e if isinstance(e, EventRecord) else event_from_dict(e) for e in events]
            queries = query_for_events(parsed, self.model, self.vocab)
        else:
            entry = self.store.get(user_id) if user_id is not None else None
            if entry is None:
                raise EmptyHistory("no inline events and no cached vectors for this user")
            queries = entry.vectors
            cache_hit = True
        steps = [{"step": s + 1, "items": self._results(snap, queries[s], k)} for s in range(queries.shape[0])]
        return {"steps": steps, "model_version": self.model_version, "index_version": snap.version,
                "cache_hit": cache_hit}

    def similar_items(self, item_id: str, k: int = 20) -> dict:
        if not isinstance(k, int) or k < 1:
            raise BadRequest("k must be a positive integer")
        snap = self.snapshot()
        if item_id not in snap.index:
            raise KeyError(item_id)
        items = self._results(snap, snap.index.embedding(item_id), k, skip=item_id)
        return {"item_id": item_id, "items": items, "model_version": self.model_version,
                "index_version": snap.version}

    def health(self) -> dict:
        snap = self._snapshot
        return {"status": "ok" if snap is not None else "not_ready", "model_version": self.model_version,
                "index_version": snap.version if snap is not None else None}


def load_service(ckpt_path, index_path=None, store_path=None) -> RecommendationService:
    """Build a service from on-disk artifacts; the vocabulary travels inside the checkpoint."""
    model, _, extra = MercatranModel.load(ckpt_path)
    if "vocab" not in extra:
        raise BadRequest("checkpoint does not embed a vocabulary")
    vocab = Vocab.from_dict(extra["vocab"])
    with open(ckpt_path, "rb") as fh:
        version = hashlib.sha256(fh.read()).hexdigest()[:12]
    store = FeatureStore(store_path, model.config.forecast_steps, model.config.d)
    svc = RecommendationService(model, vocab, store, version)
    if index_path is not None and os.path.exists(index_path):
        svc.swap_index(load_index(index_path), load_catalog(index_path))
    return svc
