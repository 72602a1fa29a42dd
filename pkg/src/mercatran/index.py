"""Exact top-K cosine index over unit item embeddings.

Scores are dot products accumulated in double precision over dimensions in
index order, with the query rounded to float32 first, so every backend returns
the same bits. Ties go to the lexicographically smaller item_id.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .container import atomic_write_bytes
from .errors import CorruptFile, DimensionMismatch, InvalidArg, NonUnitEmbedding

MAGIC = b"MIDX1"
_LEN = struct.Struct("<I")
UNIT_TOL = 1e-4


@dataclass(frozen=True)
class IndexedItem:
    item_id: str
    embedding: np.ndarray
    brand_id: int = 0
    c2_id: int = 0


class EmbeddingIndex:
    """Immutable set of unit vectors with item metadata."""

    def __init__(self, item_ids: Sequence[str], embeddings: np.ndarray, brand_ids=None, c2_ids=None, d: Optional[int] = None):
        emb = np.ascontiguousarray(embeddings, dtype=np.float32)
        n = len(item_ids)
        if emb.ndim != 2 or emb.shape[0] != n:
            if n == 0:
                emb = np.zeros((0, d or 0), dtype=np.float32)
            else:
                raise DimensionMismatch(f"expected [{n}, d] embeddings, got {emb.shape}")
        self.item_ids = tuple(item_ids)
        self.d = int(emb.shape[1]) if d is None else int(d)
        self.embeddings = emb
        self.brand_ids = np.asarray(brand_ids if brand_ids is not None else np.zeros(n), dtype=np.int64)
        self.c2_ids = np.asarray(c2_ids if c2_ids is not None else np.zeros(n), dtype=np.int64)
        order = sorted(range(n), key=self.item_ids.__getitem__)
        rank = np.empty(n, dtype=np.int64)
        rank[order] = np.arange(n)
        self.id_rank = rank
        self._pos = {k: i for i, k in enumerate(self.item_ids)}
        for a in (self.embeddings, self.brand_ids, self.c2_ids, self.id_rank):
            a.setflags(write=False)

    def __len__(self):
        return len(self.item_ids)

    def __contains__(self, item_id):
        return item_id in self._pos

    def position(self, item_id: str) -> int:
        return self._pos[item_id]

    def item(self, item_id: str) -> IndexedItem:
        i = self._pos[item_id]
        return IndexedItem(item_id, self.embeddings[i].copy(), int(self.brand_ids[i]), int(self.c2_ids[i]))

    def embedding(self, item_id: str) -> np.ndarray:
        return self.embeddings[self._pos[item_id]]

    def items(self) -> list:
        return [self.item(k) for k in self.item_ids]

    def search_rows(self, query, k: int):
        """Row positions and scores of the top ``k`` entries."""
        if k < 1:
            raise InvalidArg("K must be >= 1")
        q = np.asarray(query)
        if q.ndim != 1 or q.shape[0] != self.d:
            raise DimensionMismatch(f"query has shape {q.shape}, index dimension is {self.d}")
        q = np.ascontiguousarray(q.astype(np.float32).astype(np.float64))
        if len(self) == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
        return kernels.topk_scan(self.embeddings, q, self.id_rank, int(k))


def _check_unit(vec: np.ndarray, item_id: str) -> None:
    norm = float(np.sqrt(np.dot(vec.astype(np.float64), vec.astype(np.float64))))
    if not np.isfinite(norm) or abs(norm - 1.0) > UNIT_TOL:
        raise NonUnitEmbedding(f"{item_id}: norm {norm}")


def build_index(items: Iterable[IndexedItem], d: Optional[int] = None) -> EmbeddingIndex:
    """Index ``items``; a repeated item_id keeps its last entry (at the first one's position)."""
    latest: dict = {}
    for it in items:
        vec = np.asarray(it.embedding)
        if vec.ndim != 1:
            raise DimensionMismatch(f"{it.item_id}: embedding must be 1-D")
        if d is None:
            d = vec.shape[0]
        elif vec.shape[0] != d:
            raise DimensionMismatch(f"{it.item_id}: dimension {vec.shape[0]} != {d}")
        _check_unit(vec, it.item_id)
        latest[it.item_id] = it
    ids = list(latest)
    if not ids:
        return EmbeddingIndex([], np.zeros((0, d or 0), dtype=np.float32), d=d or 0)
    emb = np.stack([np.asarray(latest[k].embedding, dtype=np.float32) for k in ids])
    return EmbeddingIndex(ids, emb, [latest[k].brand_id for k in ids], [latest[k].c2_id for k in ids])


def search_topk(index: EmbeddingIndex, query, k: int) -> list:
    """``min(k, len(index))`` pairs ``(item_id, score)``, best first."""
    rows, scores = index.search_rows(query, k)
    return [(index.item_ids[r], float(s)) for r, s in zip(rows, scores)]


def _record_dtype(width: int, d: int) -> np.dtype:
    return np.dtype([("id", f"S{max(width, 1)}"), ("brand", "<i8"), ("c2", "<i8"), ("vec", "<f4", (d,))])


def index_to_bytes(index: EmbeddingIndex) -> bytes:
    raw_ids = [k.encode("utf-8") for k in index.item_ids]
    width = max((len(b) for b in raw_ids), default=1)
    dt = _record_dtype(width, index.d)
    rec = np.zeros(len(index), dtype=dt)
    rec["id"] = raw_ids
    rec["brand"] = index.brand_ids
    rec["c2"] = index.c2_ids
    rec["vec"] = index.embeddings
    head = json.dumps({"count": len(index), "d": index.d, "id_width": max(width, 1)}, sort_keys=True).encode()
    return b"".join([MAGIC, _LEN.pack(len(head)), head, rec.tobytes()])


def index_from_bytes(blob: bytes) -> EmbeddingIndex:
    if blob[:5] != MAGIC:
        raise CorruptFile("bad magic, expected MIDX1")
    if len(blob) < 5 + _LEN.size:
        raise CorruptFile("truncated header")
    (hlen,) = _LEN.unpack_from(blob, 5)
    pos = 5 + _LEN.size + hlen
    try:
        head = json.loads(blob[5 + _LEN.size : pos].decode("utf-8"))
        count, d, width = int(head["count"]), int(head["d"]), int(head["id_width"])
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptFile("unreadable index manifest") from exc
    dt = _record_dtype(width, d)
    if len(blob) - pos != count * dt.itemsize:
        raise CorruptFile(f"index payload has {len(blob) - pos} bytes, expected {count * dt.itemsize}")
    rec = np.frombuffer(blob, dtype=dt, count=count, offset=pos)
    ids = [b.decode("utf-8") for b in rec["id"]]
    return EmbeddingIndex(ids, np.array(rec["vec"], dtype=np.float32).reshape(count, d), rec["brand"].copy(),
                          rec["c2"].copy(), d=d)


def save_index(index: EmbeddingIndex, path) -> None:
    atomic_write_bytes(path, index_to_bytes(index))


def load_index(path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        return index_from_bytes(fh.read())
