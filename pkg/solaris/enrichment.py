"""Hierarchical Feature Enrichment

Fills the embedding slots of a (user, item) feature when the exact cache
entry is missing: similarity imputation from KNN-similar users' entries for
the same item, and a separate aggregated user-only embedding averaged over
the user's recent entries with the current pair excluded.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics.pairwise import cosine_similarity

from .embed_cache import CacheKey, EmbedCache
from .errors import ValidationError
from .synthetic_world import RankingRequest, UserProfile

logger = logging.getLogger(__name__)

DEFAULT_AGG_WINDOW_SECONDS = 24 * 3600.0


class EmbeddingSource(str, Enum):
    """Where the user-item embedding slot came from."""

    EXACT = "exact"
    SIMILARITY_IMPUTED = "similarity_imputed"
    ABSENT = "absent"


# Integer codes used in batched arrays, indexed by position.
SOURCES = (EmbeddingSource.EXACT, EmbeddingSource.SIMILARITY_IMPUTED, EmbeddingSource.ABSENT)
EXACT, IMPUTED, ABSENT = 0, 1, 2


class ImputationStrategy(str, Enum):
    WEIGHTED_AVERAGE = "weighted_average"
    NEAREST_SINGLE = "nearest_single"


class Neighbor(NamedTuple):
    user_id: int
    similarity: float


class NeighborTable:
    """Immutable per-user ranked neighbour lists.

    Lists are sorted by descending similarity, ties by ascending user id; a
    user never appears in its own list.
    """

    def __init__(self, neighbors: Dict[int, Sequence[Neighbor]], k: int):
        self.k = k
        self._neighbors = {int(u): tuple(Neighbor(int(v), float(s)) for v, s in rows) for u, rows in neighbors.items()}
        self._size = max(
            [u for u in self._neighbors] + [n.user_id for rows in self._neighbors.values() for n in rows],
            default=-1,
        ) + 1
        self._dense: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    @property
    def user_ids(self) -> List[int]:
        return sorted(self._neighbors)

    def neighbors_of(self, user_id: int) -> Tuple[Neighbor, ...]:
        return self._neighbors.get(int(user_id), ())

    def dense_ranks(self, user_id: int) -> Tuple[np.ndarray, np.ndarray]:
        """``(rank, similarity)`` arrays indexed by neighbour id; rank -1 means not a neighbour."""
        cached = self._dense.get(user_id)
        if cached is None:
            ranks = np.full(self._size, -1, dtype=np.int64)
            sims = np.zeros(self._size)
            for rank, neighbor in enumerate(self.neighbors_of(user_id)):
                ranks[neighbor.user_id] = rank
                sims[neighbor.user_id] = neighbor.similarity
            cached = (ranks, sims)
            self._dense[user_id] = cached
        return cached

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "neighbors": [
                {"user": u, "neighbors": [[n.user_id, n.similarity] for n in self._neighbors[u]]}
                for u in self.user_ids
            ],
        }

    def save(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NeighborTable":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls({row["user"]: [Neighbor(v, s) for v, s in row["neighbors"]] for row in data["neighbors"]}, data["k"])


def neighbor_table_from_embeddings(user_ids: Sequence[int], embeddings: np.ndarray, k: int) -> NeighborTable:
    """Exact brute-force KNN over cosine similarity.

    Zero-norm embeddings have similarity 0 to everyone.
    """
    user_ids = np.asarray(list(user_ids), dtype=np.int64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if k < 1:
        raise ValidationError("k must be at least 1")
    if user_ids.size < 2:
        raise ValidationError("a neighbour table needs at least two users")
    if embeddings.shape[0] != user_ids.size:
        raise ValidationError("one embedding per user is required")
    similarity = np.clip(cosine_similarity(embeddings), -1.0, 1.0)
    keep = min(k, user_ids.size - 1)
    table: Dict[int, List[Neighbor]] = {}
    for row, user_id in enumerate(user_ids.tolist()):
        others = np.flatnonzero(user_ids != user_id)
        order = others[np.lexsort((user_ids[others], -similarity[row, others]))][:keep]
        table[user_id] = [Neighbor(int(user_ids[col]), float(similarity[row, col])) for col in order]
    return NeighborTable(table, k)


def build_neighbor_table(users: Sequence[Union[int, UserProfile]], teacher: Any, k: int) -> NeighborTable:
    """Neighbour table over the teacher's user embeddings."""
    user_ids = [u.user_id if isinstance(u, UserProfile) else int(u) for u in users]
    embeddings = np.vstack([teacher.user_embedding(u) for u in user_ids]) if user_ids else np.zeros((0, 1))
    table = neighbor_table_from_embeddings(user_ids, embeddings, k)
    logger.info(f"Built neighbour table for {len(user_ids)} users, k={k}")
    return table


@dataclass(frozen=True)
class UserAggregate:
    vector: np.ndarray
    present: bool

    @classmethod
    def absent(cls, d_emb: int) -> "UserAggregate":
        return cls(np.zeros(d_emb), False)


@dataclass(frozen=True)
class EnrichedFeature:
    """Embedding inputs for one pair. Absent slots are zero vectors."""

    vector: np.ndarray
    source: EmbeddingSource
    user_agg: UserAggregate
    contributing_neighbors: int = 0

    def __post_init__(self):
        if self.source is EmbeddingSource.ABSENT and np.any(self.vector):
            raise ValidationError("absent feature must carry a zero vector")
        if not self.user_agg.present and np.any(self.user_agg.vector):
            raise ValidationError("absent aggregate must carry a zero vector")

    @classmethod
    def absent(cls, d_emb: int) -> "EnrichedFeature":
        return cls(np.zeros(d_emb), EmbeddingSource.ABSENT, UserAggregate.absent(d_emb))


@dataclass
class EnrichedBatch:
    """Enrichment for every candidate of one request, row-aligned with ``item_ids``."""

    item_ids: np.ndarray
    vectors: np.ndarray
    sources: np.ndarray
    agg_vectors: np.ndarray
    agg_present: np.ndarray
    contributors: np.ndarray

    @classmethod
    def absent(cls, item_ids: np.ndarray, d_emb: int) -> "EnrichedBatch":
        n = len(item_ids)
        return cls(
            item_ids=np.asarray(item_ids, dtype=np.int64),
            vectors=np.zeros((n, d_emb)),
            sources=np.full(n, ABSENT, dtype=np.int8),
            agg_vectors=np.zeros((n, d_emb)),
            agg_present=np.zeros(n, dtype=bool),
            contributors=np.zeros(n, dtype=np.int64),
        )

    def feature(self, index: int) -> EnrichedFeature:
        return EnrichedFeature(
            vector=self.vectors[index],
            source=SOURCES[int(self.sources[index])],
            user_agg=UserAggregate(self.agg_vectors[index], bool(self.agg_present[index])),
            contributing_neighbors=int(self.contributors[index]),
        )


def aggregated_user_embedding(
    cache: EmbedCache,
    user_id: int,
    exclude_item_id: int,
    now: float,
    window: float = DEFAULT_AGG_WINDOW_SECONDS,
) -> Optional[np.ndarray]:
    """Mean of the user's entries within ``window`` seconds, ``exclude_item_id`` left out."""
    item_ids, vectors = cache.user_window(user_id, now, window)
    keep = item_ids != exclude_item_id
    if not keep.any():
        return None
    return vectors[keep].mean(axis=0)


def _combine(
    strategy: ImputationStrategy, ranks: np.ndarray, sims: np.ndarray, vectors: np.ndarray
) -> Tuple[np.ndarray, int]:
    order = np.argsort(ranks, kind="stable")
    sims, vectors = sims[order], vectors[order]
    if strategy is ImputationStrategy.WEIGHTED_AVERAGE:
        weights = np.maximum(sims, 0.0)
        total = weights.sum()
        if total > 0:
            return (weights / total) @ vectors, int(np.count_nonzero(weights))
    return vectors[0].copy(), 1


def similarity_imputed_embedding(
    cache: EmbedCache,
    table: NeighborTable,
    user_id: int,
    item_id: int,
    now: float,
    ttl: float,
    strategy: Union[ImputationStrategy, str] = ImputationStrategy.NEAREST_SINGLE,
) -> Optional[Tuple[np.ndarray, int]]:
    """Impute ``(user_id, item_id)`` from neighbours holding a fresh entry for the item.

    ``weighted_average`` falls back to the nearest contributor when no
    contributor has positive similarity.

    Args:
        cache: Cache holding the neighbours' entries
        table: Ranked neighbour lists
        user_id: User whose slot is being filled
        item_id: Item of the missing pair
        now: Logical time of the lookup
        ttl: Freshness bound for contributing entries, in seconds
        strategy: ``nearest_single`` or ``weighted_average``

    Returns:
        ``(vector, contributing_neighbors)``, or ``None`` when no neighbour contributes
    """
    strategy = ImputationStrategy(strategy)
    holders, vectors = cache.fresh_holders(item_id, now, ttl)
    if holders.size == 0:
        return None
    all_ranks, all_sims = table.dense_ranks(int(user_id))
    in_table = holders < all_ranks.size
    holders, vectors = holders[in_table], vectors[in_table]
    ranks = all_ranks[holders]
    mine = ranks >= 0
    if not mine.any():
        return None
    return _combine(strategy, ranks[mine], all_sims[holders[mine]], vectors[mine])


class Enricher:
    """Runs the fallback chain for the serving path.

    Exact hit, else similarity imputation when enabled, else zeros; the
    aggregated user embedding is filled independently. Every non-exact
    lookup is handed to ``requeue``.
    """

    def __init__(
        self,
        cache: EmbedCache,
        table: Optional[NeighborTable],
        ttl_seconds: float,
        strategy: Union[ImputationStrategy, str] = ImputationStrategy.NEAREST_SINGLE,
        enable_agg: bool = True,
        enable_similarity: bool = True,
        agg_window_seconds: float = DEFAULT_AGG_WINDOW_SECONDS,
        requeue: Optional[Callable[[CacheKey, float], Any]] = None,
    ):
        if enable_similarity and table is None:
            raise ValidationError("similarity imputation needs a neighbour table")
        if ttl_seconds <= 0 or agg_window_seconds <= 0:
            raise ValidationError("ttl and aggregation window must be positive")
        self.cache = cache
        self.table = table
        self.ttl_seconds = ttl_seconds
        self.strategy = ImputationStrategy(strategy)
        self.enable_agg = enable_agg
        self.enable_similarity = enable_similarity
        self.agg_window_seconds = agg_window_seconds
        self.requeue = requeue

    @property
    def d_emb(self) -> int:
        return self.cache.d_emb

    def enrich(self, user_id: int, item_id: int, now: float) -> EnrichedFeature:
        exact = self.cache.get(CacheKey(user_id, item_id), now, self.ttl_seconds)
        contributors = 0
        if exact is not None:
            vector, source = exact.vector, EmbeddingSource.EXACT
        else:
            imputed = None
            if self.enable_similarity:
                imputed = similarity_imputed_embedding(
                    self.cache, self.table, user_id, item_id, now, self.ttl_seconds, self.strategy
                )
            if imputed is not None:
                vector, contributors = imputed
                source = EmbeddingSource.SIMILARITY_IMPUTED
            else:
                vector, source = np.zeros(self.d_emb), EmbeddingSource.ABSENT
            if self.requeue is not None:
                self.requeue(CacheKey(user_id, item_id), now)

        aggregate = UserAggregate.absent(self.d_emb)
        if self.enable_agg:
            mean = aggregated_user_embedding(self.cache, user_id, item_id, now, self.agg_window_seconds)
            if mean is not None:
                aggregate = UserAggregate(mean, True)
        return EnrichedFeature(vector, source, aggregate, contributors)

    def enrich_request(self, request: RankingRequest, now: Optional[float] = None) -> EnrichedBatch:
        """Batched ``enrich`` over the request's candidates, in candidate order."""
        now = request.timestamp if now is None else now
        user_id = request.user_id
        items = request.candidates
        batch = EnrichedBatch.absent(items, self.d_emb)
        batch.vectors, hit = self.cache.get_many(user_id, items, now, self.ttl_seconds)
        batch.sources[hit] = EXACT
        missed = np.flatnonzero(~hit)

        if self.enable_similarity:
            for index in missed.tolist():
                imputed = similarity_imputed_embedding(
                    self.cache, self.table, user_id, int(items[index]), now, self.ttl_seconds, self.strategy
                )
                if imputed is not None:
                    batch.vectors[index], batch.contributors[index] = imputed
                    batch.sources[index] = IMPUTED
        if self.requeue is not None:
            for index in missed.tolist():
                self.requeue(CacheKey(user_id, int(items[index])), now)

        if self.enable_agg:
            window_items, window_vectors = self.cache.user_window(user_id, now, self.agg_window_seconds)
            count = window_items.size
            if count:
                total = window_vectors.sum(axis=0)
                position = np.minimum(np.searchsorted(window_items, items), count - 1)
                inside = window_items[position] == items
                batch.agg_vectors[:] = total / count
                batch.agg_present[:] = True
                if count == 1:
                    batch.agg_vectors[inside] = 0.0
                    batch.agg_present[inside] = False
                elif inside.any():
                    batch.agg_vectors[inside] = (total - window_vectors[position[inside]]) / (count - 1)
        return batch


def enrich(
    cache: EmbedCache,
    table: Optional[NeighborTable],
    user_id: int,
    item_id: int,
    now: float,
    ttl: float,
    config: Any,
    requeue: Optional[Callable[[CacheKey, float], Any]] = None,
) -> EnrichedFeature:
    """One-pair fallback chain driven by an enrichment config section."""
    enricher = Enricher(
        cache,
        table,
        ttl_seconds=ttl,
        strategy=config.strategy,
        enable_agg=config.enable_agg,
        enable_similarity=config.enable_similarity,
        agg_window_seconds=config.agg_window_hours * 3600.0,
        requeue=requeue,
    )
    return enricher.enrich(user_id, item_id, now)
