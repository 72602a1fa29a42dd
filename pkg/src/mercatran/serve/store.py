"""Persistent per-user query-vector store.

File layout: ``b"MFST1"``, uint32 manifest length, JSON manifest
``{count, steps, d, id_width}``, then fixed-width little-endian records
(user_id bytes, computed_at microseconds, source_event_count, vectors).
"""
from __future__ import annotations

import json
import os
import struct
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from ..container import atomic_write_bytes
from ..errors import CorruptFile, DimensionMismatch

MAGIC = b"MFST1"
_LEN = struct.Struct("<I")


@dataclass(frozen=True)
class UserVectorCacheEntry:
    user_id: str
    vectors: np.ndarray  # [steps, d] float32
    computed_at: int  # microseconds since the epoch
    source_event_count: int

    def same_content(self, other: "UserVectorCacheEntry") -> bool:
        return (self.source_event_count == other.source_event_count
                and self.vectors.shape == other.vectors.shape
                and self.vectors.tobytes() == other.vectors.tobytes())


def now_micros() -> int:
    return time.time_ns() // 1000


def _dtype(width: int, steps: int, d: int) -> np.dtype:
    return np.dtype([("user", f"S{max(width, 1)}"), ("at", "<i8"), ("count", "<i8"), ("vec", "<f4", (steps, d))])


def store_to_bytes(entries: dict, steps: int, d: int) -> bytes:
    keys = sorted(entries)
    raw = [k.encode("utf-8") for k in keys]
    width = max((len(b) for b in raw), default=1)
    rec = np.zeros(len(keys), dtype=_dtype(width, steps, d))
    for i, k in enumerate(keys):
        e = entries[k]
        rec[i] = (raw[i], e.computed_at, e.source_event_count, e.vectors)
    head = json.dumps({"count": len(keys), "steps": steps, "d": d, "id_width": max(width, 1)}, sort_keys=True).encode()
    return b"".join([MAGIC, _LEN.pack(len(head)), head, rec.tobytes()])


def store_from_bytes(blob: bytes) -> tuple[dict, int, int]:
    if blob[:5] != MAGIC or len(blob) < 5 + _LEN.size:
        raise CorruptFile("not a feature store file")
    (hlen,) = _LEN.unpack_from(blob, 5)
    pos = 5 + _LEN.size + hlen
    try:
        head = json.loads(blob[5 + _LEN.size : pos].decode("utf-8"))
        count, steps, d, width = (int(head[k]) for k in ("count", "steps", "d", "id_width"))
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptFile("unreadable store manifest") from exc
    dt = _dtype(width, steps, d)
    if len(blob) - pos != count * dt.itemsize:
        raise CorruptFile("feature store payload length mismatch")
    rec = np.frombuffer(blob, dtype=dt, count=count, offset=pos)
    out = {}
    for r in rec:
        uid = r["user"].decode("utf-8")
        out[uid] = UserVectorCacheEntry(uid, np.array(r["vec"], dtype=np.float32), int(r["at"]), int(r["count"]))
    return out, steps, d


class FeatureStore:
    """Single-writer, many-reader key-value file keyed by user_id.

    Readers see an immutable dict snapshot; writers replace the snapshot and
    the file atomically.
    """

    def __init__(self, path=None, steps: int = 4, d: int = 64):
        self.path = path
        self.steps = steps
        self.d = d
        self._lock = threading.Lock()
        self._entries: dict = {}
        if path is not None and os.path.exists(path):
            self.reload()

    def reload(self) -> None:
        with open(self.path, "rb") as fh:
            entries, steps, d = store_from_bytes(fh.read())
        if entries and (steps, d) != (self.steps, self.d):
            raise DimensionMismatch(f"store holds [{steps}, {d}] vectors, expected [{self.steps}, {self.d}]")
        self._entries = entries

    def __len__(self):
        return len(self._entries)

    def __contains__(self, user_id):
        return user_id in self._entries

    def get(self, user_id: str) -> Optional[UserVectorCacheEntry]:
        return self._entries.get(user_id)

    def user_ids(self) -> list:
        return sorted(self._entries)

    def upsert(self, entries: Iterable[UserVectorCacheEntry]) -> int:
        """Insert or replace entries; unchanged content keeps its old timestamp. Returns the change count."""
        with self._lock:
            table = dict(self._entries)
            changed = 0
            for e in entries:
                if e.vectors.shape != (self.steps, self.d):
                    raise DimensionMismatch(f"{e.user_id}: vectors {e.vectors.shape}")
                old = table.get(e.user_id)
                if old is not None and old.same_content(e):
                    continue
                table[e.user_id] = e
                changed += 1
            if changed or (self.path is not None and not os.path.exists(self.path)):
                if self.path is not None:
                    atomic_write_bytes(self.path, store_to_bytes(table, self.steps, self.d))
                self._entries = table
            return changed
