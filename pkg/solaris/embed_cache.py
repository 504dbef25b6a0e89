"""Embedding Cache

(user, item)-keyed store of teacher embeddings with TTL-on-read, a per-user
index for windowed scans, a per-item index for neighbour imputation,
capacity-bounded eviction and exact statistics.

Vectors live in a growable slab; the indexes map ids to slab slots. Every
public method takes the cache lock, so the cache is safe to share between
serving threads and precompute workers.
"""

import json
import logging
import threading
from bisect import bisect_left
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np
from prometheus_client import CollectorRegistry, write_to_textfile
from prometheus_client.core import CounterMetricFamily, GaugeMetricFamily, HistogramMetricFamily
from prometheus_client.registry import Collector

from .errors import ValidationError
from .teacher_model import TeacherEmbedding

logger = logging.getLogger(__name__)

DEFAULT_FRESHNESS_EDGES_HOURS = (0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 12.0, 24.0)


class CacheKey(NamedTuple):
    """Ordered user-major, item-minor."""

    user_id: int
    item_id: int


@dataclass(frozen=True)
class CacheEntry:
    embedding: TeacherEmbedding
    written_at: float


class DumpRow(NamedTuple):
    key: CacheKey
    entry: CacheEntry
    age: float


class EvictionPolicy(str, Enum):
    """Which entry goes first when the cache is over capacity."""

    LRU = "lru"
    FIFO = "fifo"


def _bucket_label(edge_hours: float) -> str:
    return f"le_{edge_hours:g}h"


@dataclass(frozen=True)
class CacheStats:
    """Consistent snapshot of the cache counters.

    ``freshness_histogram`` buckets the age of every entry served as an
    exact hit; the last bucket holds ages above the largest edge.
    """

    lookups: int = 0
    exact_hits: int = 0
    expired_hits: int = 0
    misses: int = 0
    insertions: int = 0
    evictions: int = 0
    invalidations: int = 0
    compacted: int = 0
    entries: int = 0
    served_age_seconds_sum: float = 0.0
    freshness_edges_hours: Tuple[float, ...] = DEFAULT_FRESHNESS_EDGES_HOURS
    freshness_counts: Tuple[int, ...] = (0,) * (len(DEFAULT_FRESHNESS_EDGES_HOURS) + 1)

    @property
    def hit_rate(self) -> float:
        return self.exact_hits / self.lookups if self.lookups else 0.0

    @property
    def freshness_histogram(self) -> Dict[str, int]:
        labels = [_bucket_label(edge) for edge in self.freshness_edges_hours] + [
            f"gt_{self.freshness_edges_hours[-1]:g}h"
        ]
        return dict(zip(labels, self.freshness_counts))

    def to_dict(self) -> Dict:
        return {
            "lookups": self.lookups,
            "exact_hits": self.exact_hits,
            "expired_hits": self.expired_hits,
            "misses": self.misses,
            "insertions": self.insertions,
            "evictions": self.evictions,
            "invalidations": self.invalidations,
            "compacted": self.compacted,
            "entries": self.entries,
            "hit_rate": self.hit_rate,
            "freshness_histogram": self.freshness_histogram,
        }


class EmbedCache:
    """TTL-on-read embedding cache.

    An entry is fresh when ``now - written_at <= ttl``. Expired entries stay
    physically present (and count toward capacity) until ``compact`` or
    eviction removes them.

    Args:
        d_emb: Embedding dimension every entry must have.
        capacity: Maximum number of physical entries, ``None`` for unbounded.
        retention_seconds: Age beyond which ``compact`` reclaims entries.
        policy: Eviction order when over capacity.
    """

    def __init__(
        self,
        d_emb: int,
        capacity: Optional[int] = None,
        retention_seconds: Optional[float] = None,
        policy: Union[EvictionPolicy, str] = EvictionPolicy.LRU,
        freshness_edges_hours: Sequence[float] = DEFAULT_FRESHNESS_EDGES_HOURS,
    ):
        if d_emb < 1:
            raise ValidationError("d_emb must be at least 1")
        if capacity is not None and capacity < 1:
            raise ValidationError("capacity must be at least 1")
        if retention_seconds is not None and retention_seconds <= 0:
            raise ValidationError("retention must be positive")
        self.d_emb = d_emb
        self.capacity = capacity
        self.retention_seconds = retention_seconds
        self.policy = EvictionPolicy(policy)
        self._edges_hours = tuple(float(edge) for edge in freshness_edges_hours)
        self._edges_seconds = [edge * 3600.0 for edge in self._edges_hours]

        self._lock = threading.RLock()
        self._vectors = np.zeros((0, d_emb))
        self._written = np.zeros(0)
        self._computed = np.zeros(0)
        self._slot_user = np.zeros(0, dtype=np.int64)
        self._slot_item = np.zeros(0, dtype=np.int64)
        self._free: List[int] = []
        self._high_water = 0
        self._by_user: Dict[int, Dict[int, int]] = {}
        self._by_item: Dict[int, Set[int]] = {}
        self._order: "OrderedDict[int, None]" = OrderedDict()

        self._lookups = 0
        self._exact_hits = 0
        self._expired_hits = 0
        self._misses = 0
        self._insertions = 0
        self._evictions = 0
        self._invalidations = 0
        self._compacted = 0
        self._served_age_sum = 0.0
        self._freshness = np.zeros(len(self._edges_hours) + 1, dtype=np.int64)

    def __len__(self) -> int:
        with self._lock:
            return len(self._order)

    # -- slab management ---------------------------------------------------

    def _allocate(self) -> int:
        if self._free:
            return self._free.pop()
        if self._high_water == self._vectors.shape[0]:
            grown = max(1024, 2 * self._vectors.shape[0])
            extra = grown - self._vectors.shape[0]
            self._vectors = np.vstack([self._vectors, np.zeros((extra, self.d_emb))])
            self._written = np.concatenate([self._written, np.zeros(extra)])
            self._computed = np.concatenate([self._computed, np.zeros(extra)])
            self._slot_user = np.concatenate([self._slot_user, np.zeros(extra, dtype=np.int64)])
            self._slot_item = np.concatenate([self._slot_item, np.zeros(extra, dtype=np.int64)])
        slot = self._high_water
        self._high_water += 1
        return slot

    def _remove_slot(self, slot: int) -> None:
        user_id = int(self._slot_user[slot])
        item_id = int(self._slot_item[slot])
        items = self._by_user[user_id]
        del items[item_id]
        if not items:
            del self._by_user[user_id]
        holders = self._by_item[item_id]
        holders.discard(user_id)
        if not holders:
            del self._by_item[item_id]
        del self._order[slot]
        self._free.append(slot)

    def _write(self, user_id: int, item_id: int, vector: np.ndarray, now: float, computed_at: float) -> None:
        items = self._by_user.setdefault(user_id, {})
        slot = items.get(item_id)
        if slot is None:
            slot = self._allocate()
            items[item_id] = slot
            self._by_item.setdefault(item_id, set()).add(user_id)
            self._slot_user[slot] = user_id
            self._slot_item[slot] = item_id
            self._order[slot] = None
        else:
            self._order.move_to_end(slot)
        self._vectors[slot] = vector
        self._written[slot] = now
        self._computed[slot] = computed_at

    def _enforce_capacity(self) -> None:
        if self.capacity is None:
            return
        while len(self._order) > self.capacity:
            victim = next(iter(self._order))
            self._remove_slot(victim)
            self._evictions += 1

    def _check_vector(self, vector: np.ndarray) -> np.ndarray:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape[-1] != self.d_emb:
            raise ValidationError(f"embedding has {vector.shape[-1]} components, cache holds {self.d_emb}")
        if not np.all(np.isfinite(vector)):
            raise ValidationError("embedding has non-finite components")
        return vector

    # -- writes ------------------------------------------------------------

    def put(self, key: Tuple[int, int], embedding: TeacherEmbedding, now: float) -> None:
        """Store ``embedding`` under ``key`` with ``written_at = now``."""
        vector = self._check_vector(embedding.vector)
        user_id, item_id = int(key[0]), int(key[1])
        with self._lock:
            self._write(user_id, item_id, vector, float(now), float(embedding.computed_at))
            self._insertions += 1
            self._enforce_capacity()

    def put_many(
        self, user_ids: np.ndarray, item_ids: np.ndarray, vectors: np.ndarray, now: float
    ) -> int:
        """Batch ``put`` stamped at ``now``; returns the number of entries written."""
        vectors = self._check_vector(vectors)
        with self._lock:
            for user_id, item_id, vector in zip(user_ids.tolist(), item_ids.tolist(), vectors):
                self._write(user_id, item_id, vector, float(now), float(now))
            self._insertions += len(vectors)
            self._enforce_capacity()
        return len(vectors)

    def invalidate(self, key: Tuple[int, int]) -> bool:
        """Drop ``key`` if present. Not counted as an eviction."""
        with self._lock:
            slot = self._by_user.get(int(key[0]), {}).get(int(key[1]))
            if slot is None:
                return False
            self._remove_slot(slot)
            self._invalidations += 1
            return True

    def compact(self, now: float, user_id: Optional[int] = None) -> int:
        """Reclaim entries older than the retention horizon, for one user or all."""
        if self.retention_seconds is None:
            return 0
        with self._lock:
            users = [user_id] if user_id is not None else list(self._by_user)
            removed = 0
            for uid in users:
                items = self._by_user.get(uid)
                if not items:
                    continue
                slots = np.fromiter(items.values(), dtype=np.int64, count=len(items))
                stale = slots[now - self._written[slots] > self.retention_seconds]
                for slot in stale.tolist():
                    self._remove_slot(slot)
                removed += stale.size
            self._compacted += removed
            return removed

    # -- reads -------------------------------------------------------------

    def _record_hits(self, ages: np.ndarray) -> None:
        self._served_age_sum += float(ages.sum())
        buckets = np.searchsorted(self._edges_seconds, ages, side="left")
        self._freshness += np.bincount(buckets, minlength=self._freshness.size)

    def get(self, key: Tuple[int, int], now: float, ttl: float) -> Optional[TeacherEmbedding]:
        """The entry under ``key`` if present and aged at most ``ttl`` seconds."""
        if not ttl > 0:
            raise ValidationError("ttl must be positive")
        with self._lock:
            self._lookups += 1
            slot = self._by_user.get(int(key[0]), {}).get(int(key[1]))
            if slot is None:
                self._misses += 1
                return None
            age = now - self._written[slot]
            if age > ttl:
                self._expired_hits += 1
                return None
            self._exact_hits += 1
            self._served_age_sum += float(age)
            self._freshness[bisect_left(self._edges_seconds, age)] += 1
            if self.policy is EvictionPolicy.LRU:
                self._order.move_to_end(slot)
            return TeacherEmbedding(vector=self._vectors[slot].copy(), computed_at=float(self._computed[slot]))

    def get_many(
        self, user_id: int, item_ids: np.ndarray, now: float, ttl: float
    ) -> Tuple[np.ndarray, np.ndarray]:
        """``get`` for every item of one user.

        Returns ``(vectors, hit)``: zero rows where ``hit`` is false. Stats move
        exactly as if ``get`` had been called once per item.
        """
        if not ttl > 0:
            raise ValidationError("ttl must be positive")
        item_ids = np.asarray(item_ids, dtype=np.int64)
        n = item_ids.shape[0]
        vectors = np.zeros((n, self.d_emb))
        with self._lock:
            items = self._by_user.get(int(user_id), {})
            slots = np.fromiter((items.get(i, -1) for i in item_ids.tolist()), dtype=np.int64, count=n)
            present = slots >= 0
            ages = np.full(n, np.inf)
            ages[present] = now - self._written[slots[present]]
            hit = present & (ages <= ttl)
            self._lookups += n
            self._misses += int(n - present.sum())
            self._expired_hits += int(present.sum() - hit.sum())
            self._exact_hits += int(hit.sum())
            if hit.any():
                hit_slots = slots[hit]
                vectors[hit] = self._vectors[hit_slots]
                self._record_hits(ages[hit])
                if self.policy is EvictionPolicy.LRU:
                    for slot in hit_slots.tolist():
                        self._order.move_to_end(slot)
        return vectors, hit

    def peek(self, key: Tuple[int, int]) -> Optional[CacheEntry]:
        """Entry under ``key`` regardless of age; leaves stats and recency alone."""
        with self._lock:
            slot = self._by_user.get(int(key[0]), {}).get(int(key[1]))
            if slot is None:
                return None
            return self._entry(slot)

    def ages(self, user_id: int, item_ids: np.ndarray, now: float) -> np.ndarray:
        """Age of each ``(user_id, item)`` entry, ``inf`` when absent. Stat-free."""
        item_ids = np.asarray(item_ids, dtype=np.int64)
        with self._lock:
            items = self._by_user.get(int(user_id), {})
            slots = np.fromiter(
                (items.get(i, -1) for i in item_ids.tolist()), dtype=np.int64, count=item_ids.shape[0]
            )
            ages = np.full(item_ids.shape[0], np.inf)
            present = slots >= 0
            ages[present] = now - self._written[slots[present]]
        return ages

    def _entry(self, slot: int) -> CacheEntry:
        return CacheEntry(
            embedding=TeacherEmbedding(vector=self._vectors[slot].copy(), computed_at=float(self._computed[slot])),
            written_at=float(self._written[slot]),
        )

    def user_window(self, user_id: int, now: float, window: float) -> Tuple[np.ndarray, np.ndarray]:
        """``(item_ids, vectors)`` of the user's entries aged at most ``window``, by item id."""
        if not window > 0:
            raise ValidationError("window must be positive")
        with self._lock:
            items = self._by_user.get(int(user_id))
            if not items:
                return np.empty(0, dtype=np.int64), np.zeros((0, self.d_emb))
            item_ids = np.fromiter(items.keys(), dtype=np.int64, count=len(items))
            slots = np.fromiter(items.values(), dtype=np.int64, count=len(items))
            keep = now - self._written[slots] <= window
            item_ids, slots = item_ids[keep], slots[keep]
            order = np.argsort(item_ids, kind="stable")
            return item_ids[order], self._vectors[slots[order]].copy()

    def scan_user(self, user_id: int, now: float, window: float) -> List[Tuple[int, TeacherEmbedding, float]]:
        """All entries of ``user_id`` aged at most ``window``, in ascending item id order."""
        if not window > 0:
            raise ValidationError("window must be positive")
        with self._lock:
            items = self._by_user.get(int(user_id))
            if not items:
                return []
            rows = []
            for item_id in sorted(items):
                slot = items[item_id]
                if now - self._written[slot] <= window:
                    entry = self._entry(slot)
                    rows.append((item_id, entry.embedding, entry.written_at))
            return rows

    def fresh_holders(self, item_id: int, now: float, ttl: float) -> Tuple[np.ndarray, np.ndarray]:
        """``(user_ids, vectors)`` of users holding a fresh entry for ``item_id``. Stat-free."""
        with self._lock:
            holders = self._by_item.get(int(item_id))
            if not holders:
                return np.empty(0, dtype=np.int64), np.zeros((0, self.d_emb))
            user_ids = np.fromiter(holders, dtype=np.int64, count=len(holders))
            slots = np.fromiter(
                (self._by_user[u][int(item_id)] for u in user_ids.tolist()), dtype=np.int64, count=user_ids.size
            )
            keep = now - self._written[slots] <= ttl
            return user_ids[keep], self._vectors[slots[keep]].copy()

    # -- inspection --------------------------------------------------------

    def stats(self) -> CacheStats:
        with self._lock:
            return CacheStats(
                lookups=self._lookups,
                exact_hits=self._exact_hits,
                expired_hits=self._expired_hits,
                misses=self._misses,
                insertions=self._insertions,
                evictions=self._evictions,
                invalidations=self._invalidations,
                compacted=self._compacted,
                entries=len(self._order),
                served_age_seconds_sum=self._served_age_sum,
                freshness_edges_hours=self._edges_hours,
                freshness_counts=tuple(int(count) for count in self._freshness),
            )

    def dump(self, now: float) -> List[DumpRow]:
        """Every physical entry with its age at ``now``, in key order."""
        with self._lock:
            rows = [
                DumpRow(CacheKey(user_id, item_id), self._entry(slot), now - float(self._written[slot]))
                for user_id, items in self._by_user.items()
                for item_id, slot in items.items()
            ]
        rows.sort(key=lambda row: row.key)
        return rows

    # -- persistence -------------------------------------------------------

    def save_snapshot(self, path: Union[str, Path]) -> int:
        """Write entries as JSON ``{user_id, item_id, vector, written_at, computed_at}``."""
        rows = self.dump(0.0)
        payload = {
            "d_emb": self.d_emb,
            "entries": [
                {
                    "user_id": row.key.user_id,
                    "item_id": row.key.item_id,
                    "vector": row.entry.embedding.vector.tolist(),
                    "written_at": row.entry.written_at,
                    "computed_at": row.entry.embedding.computed_at,
                }
                for row in rows
            ],
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(payload), encoding="utf-8")
        return len(rows)

    @classmethod
    def load_snapshot(cls, path: Union[str, Path], **kwargs) -> "EmbedCache":
        """Rebuild a cache from ``save_snapshot`` output. Counters start at zero."""
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        cache = cls(payload["d_emb"], **kwargs)
        with cache._lock:
            for entry in payload["entries"]:
                vector = cache._check_vector(entry["vector"])
                cache._write(
                    int(entry["user_id"]), int(entry["item_id"]), vector,
                    float(entry["written_at"]), float(entry["computed_at"]),
                )
            cache._enforce_capacity()
        logger.info(f"Loaded {len(cache)} cache entries from {path}")
        return cache

    def export_stats(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.stats().to_dict(), indent=2), encoding="utf-8")

    def metrics_registry(self, prefix: str = "solaris_cache") -> CollectorRegistry:
        registry = CollectorRegistry()
        registry.register(CacheStatsCollector(self, prefix))
        return registry

    def write_prometheus(self, path: Union[str, Path], prefix: str = "solaris_cache") -> None:
        write_to_textfile(str(path), self.metrics_registry(prefix))


class CacheStatsCollector(Collector):
    """Exposes a cache's counters as Prometheus metric families on scrape."""

    def __init__(self, cache: EmbedCache, prefix: str = "solaris_cache"):
        self.cache = cache
        self.prefix = prefix

    def collect(self):
        stats = self.cache.stats()
        counters = {
            "lookups": ("Cache lookups", stats.lookups),
            "exact_hits": ("Lookups served fresh", stats.exact_hits),
            "expired_hits": ("Lookups that found an entry older than the TTL", stats.expired_hits),
            "misses": ("Lookups with no entry", stats.misses),
            "insertions": ("Entries written", stats.insertions),
            "evictions": ("Entries evicted for capacity", stats.evictions),
        }
        for name, (documentation, value) in counters.items():
            yield CounterMetricFamily(f"{self.prefix}_{name}", documentation, value=value)
        yield GaugeMetricFamily(f"{self.prefix}_entries", "Physical entries held", value=stats.entries)
        yield GaugeMetricFamily(f"{self.prefix}_hit_rate", "exact_hits / lookups", value=stats.hit_rate)

        cumulative = np.cumsum(stats.freshness_counts)
        buckets = [
            (f"{edge * 3600.0:g}", float(count))
            for edge, count in zip(stats.freshness_edges_hours, cumulative[:-1])
        ]
        buckets.append(("+Inf", float(cumulative[-1])))
        yield HistogramMetricFamily(
            f"{self.prefix}_served_age_seconds",
            "Age of entries served as exact hits",
            buckets=buckets,
            sum_value=stats.served_age_seconds_sum,
        )
