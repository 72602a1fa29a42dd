"""Feature store, precompute jobs, and the recommendation service."""
from .service import (
    RecommendationService,
    Snapshot,
    latest_history,
    load_service,
    precompute_items,
    precompute_users,
    query_for_events,
)
from .store import FeatureStore, UserVectorCacheEntry

__all__ = [
    "FeatureStore",
    "RecommendationService",
    "Snapshot",
    "UserVectorCacheEntry",
    "latest_history",
    "load_service",
    "precompute_items",
    "precompute_users",
    "query_for_events",
]
