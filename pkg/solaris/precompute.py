"""Asynchronous Precompute

Background pipeline that turns verifier selections and serving misses into
cache entries. Tasks wait in a two-class priority queue (miss re-enqueues
ahead of speculation, FIFO within a class) and are drained at refresh-cycle
boundaries by workers whose teacher cost is charged to a simulated clock.
"""

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Deque, Dict, List, Optional

import numpy as np

from .config import WorkerConfig
from .embed_cache import CacheKey, EmbedCache
from .synthetic_world import RankingRequest
from .teacher_model import TeacherModel, simulate_compute_latency
from .verifier import VerifierDecision

logger = logging.getLogger(__name__)


class TaskOrigin(str, Enum):
    REQUEST_SPECULATION = "request_speculation"
    MISS_REQUEUE = "miss_requeue"


@dataclass(frozen=True)
class PrecomputeTask:
    key: CacheKey
    enqueued_at: float
    origin: TaskOrigin
    scheduled_for: float


@dataclass
class QueueStats:
    enqueued: int = 0
    deduplicated: int = 0
    promoted: int = 0
    skipped_fresh: int = 0
    dropped: int = 0
    popped: int = 0


def next_cycle_boundary(now: float, cycle_period: float) -> float:
    """First cycle start strictly after ``now``."""
    return (math.floor(now / cycle_period) + 1) * cycle_period


class PrecomputeQueue:
    """Bounded two-class queue with per-key deduplication.

    At most one live task exists per key. A task offered within
    ``dedup_window`` of the live one is absorbed, except that a miss
    re-enqueue promotes a live speculation task to the miss class. A
    speculation offered for a key with a live miss task is always absorbed.
    Over capacity, the oldest speculation task is dropped first.
    """

    def __init__(self, capacity: int, dedup_window: float):
        self.capacity = capacity
        self.dedup_window = dedup_window
        self.stats = QueueStats()
        self._live: Dict[CacheKey, PrecomputeTask] = {}
        self._lanes: Dict[TaskOrigin, Deque[PrecomputeTask]] = {
            TaskOrigin.MISS_REQUEUE: deque(),
            TaskOrigin.REQUEST_SPECULATION: deque(),
        }

    def __len__(self) -> int:
        return len(self._live)

    def pending(self, key: CacheKey) -> Optional[PrecomputeTask]:
        return self._live.get(key)

    def tasks(self) -> List[PrecomputeTask]:
        """Live tasks in pop order."""
        return [
            task
            for origin in (TaskOrigin.MISS_REQUEUE, TaskOrigin.REQUEST_SPECULATION)
            for task in self._lanes[origin]
            if self._live.get(task.key) is task
        ]

    def offer(self, task: PrecomputeTask) -> Optional[PrecomputeTask]:
        """Enqueue ``task``; returns it, or ``None`` when it was absorbed by a live duplicate."""
        live = self._live.get(task.key)
        if (
            live is not None
            and live.origin is TaskOrigin.MISS_REQUEUE
            and task.origin is TaskOrigin.REQUEST_SPECULATION
        ):
            # A pending miss is never demoted, however old it is.
            self.stats.deduplicated += 1
            return None
        if live is not None and task.enqueued_at - live.enqueued_at <= self.dedup_window:
            if task.origin is TaskOrigin.MISS_REQUEUE and live.origin is TaskOrigin.REQUEST_SPECULATION:
                self.stats.promoted += 1
            else:
                self.stats.deduplicated += 1
                return None
        self._live[task.key] = task
        self._lanes[task.origin].append(task)
        self.stats.enqueued += 1
        while len(self._live) > self.capacity:
            self._drop_oldest()
        return task

    def _drop_oldest(self) -> None:
        for origin in (TaskOrigin.REQUEST_SPECULATION, TaskOrigin.MISS_REQUEUE):
            lane = self._lanes[origin]
            while lane:
                task = lane.popleft()
                if self._live.get(task.key) is task:
                    del self._live[task.key]
                    self.stats.dropped += 1
                    return

    def pop_due(self, limit: int, now: float) -> List[PrecomputeTask]:
        """Up to ``limit`` tasks scheduled at or before ``now``, misses first."""
        batch: List[PrecomputeTask] = []
        for origin in (TaskOrigin.MISS_REQUEUE, TaskOrigin.REQUEST_SPECULATION):
            lane = self._lanes[origin]
            while lane and len(batch) < limit:
                task = lane[0]
                if self._live.get(task.key) is not task:
                    lane.popleft()
                    continue
                if task.scheduled_for > now:
                    break
                lane.popleft()
                del self._live[task.key]
                batch.append(task)
        self.stats.popped += len(batch)
        return batch


@dataclass(frozen=True)
class CycleReport:
    cycle_start: float
    tasks_processed: int = 0
    embeddings_written: int = 0
    failures: int = 0
    simulated_worker_time: float = 0.0
    dropped: int = 0
    backlog: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def cycle_capacity(config: WorkerConfig, queued: int) -> int:
    """Tasks the workers can finish in one period: ``workers * floor(period / cost)``."""
    cost = config.per_embedding_cost_seconds
    if cost == 0:
        return queued
    return config.worker_count * int(math.floor(config.cycle_period_seconds / cost + 1e-9))


def _process_batch(tasks: List[PrecomputeTask], cache: EmbedCache, teacher: TeacherModel, now: float) -> int:
    users = np.fromiter((task.key.user_id for task in tasks), dtype=np.int64, count=len(tasks))
    items = np.fromiter((task.key.item_id for task in tasks), dtype=np.int64, count=len(tasks))
    vectors, valid = teacher.interaction_embeddings(users, items)
    if valid.any():
        cache.put_many(users[valid], items[valid], vectors[valid], now)
    return int(valid.sum())


def run_cycle(
    queue: PrecomputeQueue,
    cache: EmbedCache,
    teacher: TeacherModel,
    now: float,
    config: WorkerConfig,
    executor: Optional[ThreadPoolExecutor] = None,
    dropped: int = 0,
) -> CycleReport:
    """Drain one cycle's worth of due tasks into the cache at logical time ``now``.

    Each worker owns a contiguous slice of the batch. With ``executor`` the
    slices run on threads, otherwise sequentially.

    Args:
        queue: Pending tasks; due ones are popped misses first
        cache: Destination of the computed embeddings
        teacher: Embedding source
        now: Cycle start; every write is stamped with it
        config: Worker count, per-embedding cost and cycle period
        executor: Optional thread pool for the worker slices
        dropped: Overflow drops since the previous cycle, carried into the report

    Returns:
        CycleReport for the cycle
    """
    tasks = queue.pop_due(cycle_capacity(config, len(queue)), now)
    if not tasks:
        return CycleReport(cycle_start=now, dropped=dropped, backlog=len(queue))
    slices = [list(part) for part in np.array_split(np.arange(len(tasks)), config.worker_count) if len(part)]
    batches = [[tasks[i] for i in part] for part in slices]
    if executor is None:
        written = sum(_process_batch(batch, cache, teacher, now) for batch in batches)
    else:
        futures = [executor.submit(_process_batch, batch, cache, teacher, now) for batch in batches]
        written = sum(future.result() for future in futures)
    return CycleReport(
        cycle_start=now,
        tasks_processed=len(tasks),
        embeddings_written=written,
        failures=len(tasks) - written,
        simulated_worker_time=simulate_compute_latency(config, len(tasks)),
        dropped=dropped,
        backlog=len(queue),
    )


class PrecomputeService:
    """Owns the queue and the cycle clock for one run.

    The serving path calls ``requeue_miss``; the driver calls ``speculate``
    after each request and ``run_due_cycles`` before the next one.
    """

    def __init__(
        self,
        cache: EmbedCache,
        teacher: TeacherModel,
        config: WorkerConfig,
        ttl_seconds: float,
        deterministic: bool = True,
        sink: Any = None,
    ):
        self.cache = cache
        self.teacher = teacher
        self.config = config
        self.ttl_seconds = ttl_seconds
        self.queue = PrecomputeQueue(config.queue_capacity, config.dedup_window_seconds)
        self.sink = sink
        self.next_cycle = config.cycle_period_seconds
        self.reports: List[CycleReport] = []
        self._executor = None if deterministic else ThreadPoolExecutor(max_workers=config.worker_count)
        self._dropped_seen = 0

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "PrecomputeService":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def _task(self, key: CacheKey, now: float, origin: TaskOrigin) -> PrecomputeTask:
        return PrecomputeTask(
            key=key,
            enqueued_at=now,
            origin=origin,
            scheduled_for=next_cycle_boundary(now, self.config.cycle_period_seconds),
        )

    def requeue_miss(self, key: CacheKey, now: float) -> PrecomputeTask:
        """Queue a serving miss for the next cycle; returns the live task for the key."""
        task = self._task(CacheKey(int(key[0]), int(key[1])), now, TaskOrigin.MISS_REQUEUE)
        return self.queue.offer(task) or self.queue.pending(task.key)

    def speculate(
        self, request: RankingRequest, decision: VerifierDecision, now: float, evict_rejected: bool = False
    ) -> List[PrecomputeTask]:
        """Queue the verifier's selection, skipping pairs still fresh enough.

        Args:
            request: Request the decision was made for
            decision: Verifier output; only ``selected`` items are queued
            now: Logical time; tasks run at the next cycle boundary after it
            evict_rejected: Invalidate the rejected pairs' cache entries

        Returns:
            Tasks newly queued; absorbed duplicates are left out
        """
        selected = np.asarray(decision.selected, dtype=np.int64)
        ages = self.cache.ages(request.user_id, selected, now)
        fresh = ages <= self.config.refresh_skip_fraction * self.ttl_seconds
        self.queue.stats.skipped_fresh += int(fresh.sum())
        created = []
        for item_id in selected[~fresh].tolist():
            task = self.queue.offer(
                self._task(CacheKey(request.user_id, item_id), now, TaskOrigin.REQUEST_SPECULATION)
            )
            if task is not None:
                created.append(task)
        if evict_rejected:
            for item_id in decision.rejected:
                self.cache.invalidate(CacheKey(request.user_id, item_id))
        return created

    def run_due_cycles(self, until: float) -> List[CycleReport]:
        """Run every cycle whose start is at or before ``until``."""
        reports = []
        while self.next_cycle <= until:
            dropped = self.queue.stats.dropped - self._dropped_seen
            self._dropped_seen = self.queue.stats.dropped
            report = run_cycle(
                self.queue, self.cache, self.teacher, self.next_cycle, self.config, self._executor, dropped
            )
            if dropped:
                logger.warning(f"Precompute queue dropped {dropped} tasks before cycle {self.next_cycle:.0f}s")
            logger.debug(
                f"Cycle {self.next_cycle:.0f}s processed={report.tasks_processed} backlog={report.backlog}"
            )
            if self.sink is not None:
                self.sink.write(report.to_dict())
            self.reports.append(report)
            reports.append(report)
            self.next_cycle += self.config.cycle_period_seconds
        return reports

    def totals(self) -> Dict[str, Any]:
        processed = sum(r.tasks_processed for r in self.reports)
        return {
            "cycles": len(self.reports),
            "tasks_processed": processed,
            "embeddings_written": sum(r.embeddings_written for r in self.reports),
            "failures": sum(r.failures for r in self.reports),
            "simulated_worker_time": sum(r.simulated_worker_time for r in self.reports),
            "queue": asdict(self.queue.stats),
            "backlog": len(self.queue),
        }


def speculate(
    request: RankingRequest, decision: VerifierDecision, now: float, service: PrecomputeService
) -> List[PrecomputeTask]:
    return service.speculate(request, decision, now)


def requeue_miss(key: CacheKey, now: float, service: PrecomputeService) -> PrecomputeTask:
    return service.requeue_miss(key, now)
