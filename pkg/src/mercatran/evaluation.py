"""Offline retrieval metrics at item, category (c2) and brand granularity."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyTestSet, InvalidArg, InvalidRank
from .index import EmbeddingIndex, IndexedItem, build_index

GRANULARITIES = ("item", "category", "brand")
DEFAULT_KS = (5, 20)


def ndcg_single(rank: Optional[int], k: int) -> float:
    """Gain of one relevant item at 1-based ``rank`` (``None`` for a miss)."""
    if k < 1:
        raise InvalidArg("K must be >= 1")
    if rank is None:
        return 0.0
    if rank < 1:
        raise InvalidRank(f"rank must be >= 1, got {rank}")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def recall_single(hit: bool) -> int:
    return 1 if hit else 0


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


@dataclass
class EvalReport:
    feature_config: str
    steps: int
    ks: tuple
    recall: dict = field(default_factory=dict)  # (granularity, step, K) -> value
    ndcg: dict = field(default_factory=dict)  # (step, K) -> value
    n_sequences: int = 0
    n_indexed_items: int = 0

    def rows(self) -> list:
        out = []
        for gran in GRANULARITIES:
            for s in range(1, self.steps + 1):
                row = {"granularity": gran, "step": s}
                for k in self.ks:
                    row[f"ndcg@{k}"] = self.ndcg[(s, k)] if gran == "item" else None
                for k in self.ks:
                    row[f"recall@{k}"] = self.recall[(gran, s, k)]
                out.append(row)
        return out

    def to_dict(self) -> dict:
        return {
            "feature_config": self.feature_config,
            "counts": {"sequences": self.n_sequences, "indexed_items": self.n_indexed_items},
            "ks": list(self.ks),
            "rows": self.rows(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        ks = tuple(obj["ks"])
        rep = cls(obj["feature_config"], 0, ks, n_sequences=obj["counts"]["sequences"],
                  n_indexed_items=obj["counts"]["indexed_items"])
        for row in obj["rows"]:
            s = row["step"]
            rep.steps = max(rep.steps, s)
            for k in ks:
                rep.recall[(row["granularity"], s, k)] = row[f"recall@{k}"]
                if row["granularity"] == "item":
                    rep.ndcg[(s, k)] = row[f"ndcg@{k}"]
        return rep

    def cell(self, granularity: str, step: int, k: int) -> float:
        return self.recall[(granularity, step, k)]


def target_index(examples, item_vecs: np.ndarray) -> EmbeddingIndex:
    """Index over the union of all target items (last occurrence wins per item_id)."""
    rows = examples.targets.ravel()
    return build_index(
        IndexedItem(examples.item_ids[r], item_vecs[r], int(examples.brand_ids[r]), int(examples.c2_ids[r]))
        for r in rows
    )


def evaluate_vectors(examples, item_vecs: np.ndarray, queries: np.ndarray, ks: Sequence[int] = DEFAULT_KS,
                     feature_config: Optional[str] = None) -> EvalReport:
    """Score precomputed query vectors [n, S, d] against the target-item index."""
    n = len(examples)
    if n == 0:
        raise EmptyTestSet("no test examples")
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise InvalidArg("K values must be >= 1")
    index = target_index(examples, item_vecs)
    kmax = ks[-1]
    steps = examples.targets.shape[1]
    hits = {(g, s, k): [] for g in GRANULARITIES for s in range(1, steps + 1) for k in ks}
    gains = {(s, k): [] for s in range(1, steps + 1) for k in ks}
    for i in range(n):
        for s in range(steps):
            truth = examples.targets[i, s]
            rows, _ = index.search_rows(queries[i, s], kmax)
            ids = [index.item_ids[r] for r in rows]
            tid = examples.item_ids[truth]
            rank = ids.index(tid) + 1 if tid in ids else None
            for k in ks:
                top = rows[:k]
                hits[("item", s + 1, k)].append(recall_single(rank is not None and rank <= k))
                hits[("category", s + 1, k)].append(recall_single(bool(np.any(index.c2_ids[top] == examples.c2_ids[truth]))))
                hits[("brand", s + 1, k)].append(recall_single(bool(np.any(index.brand_ids[top] == examples.brand_ids[truth]))))
                gains[(s + 1, k)].append(ndcg_single(rank, k))
    return EvalReport(
        feature_config=feature_config or getattr(examples, "feature_config", ""),
        steps=steps,
        ks=ks,
        recall={key: _mean(v) for key, v in hits.items()},
        ndcg={key: _mean(v) for key, v in gains.items()},
        n_sequences=n,
        n_indexed_items=len(index),
    )


def evaluate(model, examples, ks: Sequence[int] = DEFAULT_KS, batch_size: int = 256) -> EvalReport:
    """Generate query vectors for every test history and score them."""
    from .model import item_vectors, query_vectors

    if len(examples) == 0:
        raise EmptyTestSet("no test examples")
    vecs = item_vectors(model, examples.item_tokens)
    queries = query_vectors(model, examples, batch_size)
    return evaluate_vectors(examples, vecs, queries, ks, model.config.feature_config)


def item_popularity(train_examples) -> dict:
    """Occurrences of each item_id across training histories and targets."""
    counts: dict = {}
    rows = np.concatenate([train_examples.history[train_examples.history >= 0], train_examples.targets.ravel()])
    for r in rows:
        key = train_examples.item_ids[r]
        counts[key] = counts.get(key, 0) + 1
    return counts


def popularity_recall(train_examples, test_examples, k: int = 20, step: int = 1) -> float:
    """Item Recall@k of a fixed most-popular list drawn from the evaluation index."""
    if len(test_examples) == 0:
        raise EmptyTestSet("no test examples")
    counts = item_popularity(train_examples)
    candidates = sorted({test_examples.item_ids[r] for r in test_examples.targets.ravel()})
    ranked = sorted(candidates, key=lambda x: (-counts.get(x, 0), x))[:k]
    top = set(ranked)
    truth = test_examples.targets[:, step - 1]
    return _mean(recall_single(test_examples.item_ids[r] in top) for r in truth)
