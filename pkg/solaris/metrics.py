"""Metrics

Coverage, freshness, hit-rate and loss reporting over serving records, plus
the offline coverage sweep and the imputation-quality study. Absolute loss
numbers are specific to the synthetic world; only their ordering across
arms and coverage levels is meaningful.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import log_loss

from .config import ExperimentConfig
from .embed_cache import CacheStats
from .enrichment import ABSENT, EXACT, IMPUTED, SOURCES, neighbor_table_from_embeddings
from .errors import ValidationError
from .serving import ServingRecord, VerticalModel, train_online
from .synthetic_world import generate_world
from .teacher_model import create_default_teacher

logger = logging.getLogger(__name__)

REPORT_NOTE = (
    "Absolute loss values depend on the synthetic world; compare arms and "
    "coverage levels by ordering only."
)


def bce(labels: Sequence[int], predictions: Sequence[float]) -> float:
    """Mean binary cross-entropy."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValidationError("no labelled impressions")
    return float(log_loss(labels, np.asarray(predictions, dtype=np.float64), labels=[0, 1]))


def relative_bce_reduction(baseline_bce: float, treatment_bce: float) -> float:
    """Percent reduction versus the baseline; positive means the treatment is better."""
    if baseline_bce <= 0:
        raise ValidationError("baseline BCE must be positive")
    return (baseline_bce - treatment_bce) / baseline_bce * 100.0


@dataclass
class ExperimentReport:
    arm: str
    n_requests: int
    n_lookups: int
    n_labeled: int
    coverage_exact: float
    coverage_effective: float
    coverage_any_signal: float
    lookup_coverage_exact: float
    lookup_coverage_effective: float
    lookup_coverage_any_signal: float
    bce: float
    label_rate: float
    source_counts: Dict[str, int]
    lookup_source_counts: Dict[str, int]
    neighbor_contributors: Dict[str, int]
    serving_latency_sim: Dict[str, float]
    hit_rate: float = 0.0
    freshness_histogram: Dict[str, int] = field(default_factory=dict)
    cache_stats: Dict[str, Any] = field(default_factory=dict)
    baseline_arm: Optional[str] = None
    baseline_bce: Optional[float] = None
    relative_bce_reduction_pct: Optional[float] = None
    config_digest: Optional[str] = None
    config: Optional[Dict[str, Any]] = None
    note: str = REPORT_NOTE

    def __post_init__(self):
        if not (0.0 <= self.coverage_exact <= self.coverage_effective <= self.coverage_any_signal <= 1.0):
            raise ValidationError(
                f"coverage chain violated: {self.coverage_exact} / {self.coverage_effective} / {self.coverage_any_signal}"
            )
        if self.bce < 0:
            raise ValidationError("BCE must be non-negative")

    def against(self, baseline_bce: float, baseline_arm: str = "baseline") -> "ExperimentReport":
        self.baseline_arm = baseline_arm
        self.baseline_bce = baseline_bce
        self.relative_bce_reduction_pct = relative_bce_reduction(baseline_bce, self.bce)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def summary_row(self) -> Dict[str, Any]:
        """Flat row for CSV tables."""
        return {
            "arm": self.arm,
            "n_requests": self.n_requests,
            "n_labeled": self.n_labeled,
            "coverage_exact": self.coverage_exact,
            "coverage_effective": self.coverage_effective,
            "coverage_any_signal": self.coverage_any_signal,
            "lookup_coverage_exact": self.lookup_coverage_exact,
            "lookup_coverage_effective": self.lookup_coverage_effective,
            "lookup_coverage_any_signal": self.lookup_coverage_any_signal,
            "bce": self.bce,
            "relative_bce_reduction_pct": self.relative_bce_reduction_pct,
            "hit_rate": self.hit_rate,
        }


class ReportAccumulator:
    """Streams serving records into the counts a report needs."""

    def __init__(self, arm: str):
        self.arm = arm
        self.n_requests = 0
        self.lookup_sources = np.zeros(len(SOURCES), dtype=np.int64)
        self.lookup_any_signal = 0
        self.labeled_sources = np.zeros(len(SOURCES), dtype=np.int64)
        self.labeled_any_signal = 0
        self.contributors: Dict[int, int] = {}
        self.labels: List[int] = []
        self.predictions: List[float] = []
        self.latencies: List[float] = []

    def add(self, record: ServingRecord) -> None:
        self.n_requests += 1
        sources = record.sources
        self.lookup_sources += np.bincount(sources, minlength=len(SOURCES))
        self.lookup_any_signal += int(np.count_nonzero((sources != ABSENT) | record.agg_present))
        labeled_sources = record.labeled_sources
        self.labeled_sources += np.bincount(labeled_sources, minlength=len(SOURCES))
        self.labeled_any_signal += int(np.count_nonzero((labeled_sources != ABSENT) | record.labeled_agg_present))
        for count in record.contributors[sources == IMPUTED].tolist():
            self.contributors[count] = self.contributors.get(count, 0) + 1
        self.labels.extend(record.labels.tolist())
        self.predictions.extend(record.labeled_predictions.tolist())
        self.latencies.append(record.serving_latency_sim)

    def extend(self, records: Iterable[ServingRecord]) -> "ReportAccumulator":
        for record in records:
            self.add(record)
        return self

    def report(
        self,
        cache_stats: Optional[CacheStats] = None,
        config: Optional[ExperimentConfig] = None,
    ) -> ExperimentReport:
        if self.n_requests == 0 or not self.labels:
            raise ValidationError("cannot report on an empty record stream")
        n_lookups = int(self.lookup_sources.sum())
        n_labeled = int(self.labeled_sources.sum())
        latencies = np.asarray(self.latencies)
        report = ExperimentReport(
            arm=self.arm,
            n_requests=self.n_requests,
            n_lookups=n_lookups,
            n_labeled=n_labeled,
            coverage_exact=self.labeled_sources[EXACT] / n_labeled,
            coverage_effective=(self.labeled_sources[EXACT] + self.labeled_sources[IMPUTED]) / n_labeled,
            coverage_any_signal=self.labeled_any_signal / n_labeled,
            lookup_coverage_exact=self.lookup_sources[EXACT] / n_lookups,
            lookup_coverage_effective=(self.lookup_sources[EXACT] + self.lookup_sources[IMPUTED]) / n_lookups,
            lookup_coverage_any_signal=self.lookup_any_signal / n_lookups,
            bce=bce(self.labels, self.predictions),
            label_rate=float(np.mean(self.labels)),
            source_counts={s.value: int(c) for s, c in zip(SOURCES, self.labeled_sources)},
            lookup_source_counts={s.value: int(c) for s, c in zip(SOURCES, self.lookup_sources)},
            neighbor_contributors={str(k): v for k, v in sorted(self.contributors.items())},
            serving_latency_sim={
                "mean": float(latencies.mean()),
                "p50": float(np.percentile(latencies, 50)),
                "p99": float(np.percentile(latencies, 99)),
                "max": float(latencies.max()),
            },
        )
        for name in ("coverage_exact", "coverage_effective", "coverage_any_signal",
                     "lookup_coverage_exact", "lookup_coverage_effective", "lookup_coverage_any_signal"):
            setattr(report, name, float(getattr(report, name)))
        if cache_stats is not None:
            report.hit_rate = cache_stats.hit_rate
            report.freshness_histogram = cache_stats.freshness_histogram
            report.cache_stats = cache_stats.to_dict()
        if config is not None:
            report.config = config.to_payload()
            report.config_digest = config.digest()
        return report


def compute_report(
    records: Iterable[ServingRecord],
    cache_stats: Optional[CacheStats] = None,
    config: Optional[ExperimentConfig] = None,
    arm: str = "treatment",
    baseline_bce: Optional[float] = None,
    baseline_arm: str = "baseline",
) -> ExperimentReport:
    """Report over ``records``; coverage is counted on labelled examples and on all lookups.

    Raises:
        ValidationError: ``records`` is empty.
    """
    report = ReportAccumulator(arm).extend(records).report(cache_stats, config)
    if baseline_bce is not None:
        report.against(baseline_bce, baseline_arm)
    return report


# -- offline studies -----------------------------------------------------------


@dataclass
class LabeledSet:
    """Labelled slate impressions of one seed with their oracle embeddings."""

    seed: int
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray
    mask_draws: np.ndarray

    def __len__(self) -> int:
        return self.labels.shape[0]


def collect_labeled_set(config: ExperimentConfig, seed: int, n_requests: Optional[int] = None) -> LabeledSet:
    """Replay ``n_requests`` requests and compute exact embeddings for every labelled pair."""
    n_requests = n_requests or config.run.sweep_requests
    world = generate_world(config.world.model_copy(update={"seed": seed}))
    teacher = create_default_teacher(world, config.teacher.d_emb)
    stream = world.request_stream()
    slate = config.serving.label_slate_n
    users, items, labels = [], [], []
    for _ in range(n_requests):
        request = stream.next_request()
        chosen = request.candidates[:slate]
        users.append(np.full(chosen.size, request.user_id, dtype=np.int64))
        items.append(chosen)
        labels.append(world.true_labels(request.user_id, chosen, request.timestamp))
    users_arr = np.concatenate(users)
    items_arr = np.concatenate(items)
    embeddings, _ = teacher.interaction_embeddings(users_arr, items_arr)
    draws = np.random.default_rng([seed, 7]).random(users_arr.size)
    return LabeledSet(seed, users_arr, items_arr, np.concatenate(labels).astype(np.int64), embeddings, draws)


def _progressive_bce(
    config: ExperimentConfig, labeled: LabeledSet, embeddings: np.ndarray, present: np.ndarray, chunk: int = 8192
) -> float:
    layout = config.serving.layout(config.teacher.d_emb)
    model = VerticalModel.zeros(layout.dim, config.serving.learning_rate)
    predictions = []
    for start in range(0, len(labeled), chunk):
        stop = min(start + chunk, len(labeled))
        rows = np.arange(stop - start)
        features = np.zeros((stop - start, layout.dim))
        features[rows, [layout.user_index(u) for u in labeled.users[start:stop].tolist()]] = 1.0
        features[rows, [layout.item_index(i) for i in labeled.items[start:stop].tolist()]] = 1.0
        features[:, layout.bias_index] = 1.0
        block_present = present[start:stop]
        features[:, layout.emb_offset : layout.agg_offset] = embeddings[start:stop] * block_present[:, None]
        features[:, layout.flags_offset] = block_present
        model, block_predictions = train_online(model, features, labeled.labels[start:stop])
        predictions.append(block_predictions)
    return bce(labeled.labels, np.concatenate(predictions))


def _map_seeds(config: ExperimentConfig, seeds: Sequence[int], work) -> List[Any]:
    if config.run.deterministic_mode or len(seeds) < 2:
        return [work(seed) for seed in seeds]
    with ThreadPoolExecutor(max_workers=len(seeds)) as pool:
        return list(pool.map(work, seeds))


def coverage_sweep(
    config: ExperimentConfig,
    coverage_levels: Optional[Sequence[float]] = None,
    seeds: Optional[Sequence[int]] = None,
    n_requests: Optional[int] = None,
) -> pd.DataFrame:
    """Oracle-coverage sweep: one row per (seed, level).

    Exact embeddings exist for every labelled pair; a seeded Bernoulli mask
    keeps each with probability ``level``. The masks are nested across
    levels because all levels threshold the same per-example draws.
    """
    levels = list(config.run.sweep_levels if coverage_levels is None else coverage_levels)
    if not levels or any(not 0.0 <= level <= 1.0 for level in levels):
        raise ValidationError("coverage levels must lie in [0, 1]")
    if levels != sorted(levels):
        raise ValidationError("coverage levels must be sorted")
    seeds = list(config.run.seeds if seeds is None else seeds)

    def run_seed(seed: int) -> List[Dict[str, Any]]:
        labeled = collect_labeled_set(config, seed, n_requests)
        baseline = _progressive_bce(config, labeled, labeled.embeddings, np.zeros(len(labeled), dtype=bool))
        rows = []
        for level in levels:
            present = labeled.mask_draws < level
            value = _progressive_bce(config, labeled, labeled.embeddings, present)
            rows.append({
                "seed": seed,
                "coverage_level": level,
                "realized_coverage": float(present.mean()),
                "n_labeled": len(labeled),
                "bce": value,
                "baseline_bce": baseline,
                "relative_bce_reduction_pct": relative_bce_reduction(baseline, value),
            })
            logger.info(f"Sweep seed={seed} level={level:.2f} bce={value:.5f}")
        return rows

    rows = [row for seed_rows in _map_seeds(config, seeds, run_seed) for row in seed_rows]
    return pd.DataFrame(rows)


def summarize_sweep(table: pd.DataFrame) -> pd.DataFrame:
    """Seed-averaged BCE per coverage level."""
    return (
        table.groupby("coverage_level", as_index=False)
        .agg(bce=("bce", "mean"), baseline_bce=("baseline_bce", "mean"),
             realized_coverage=("realized_coverage", "mean"), seeds=("seed", "nunique"))
        .sort_values("coverage_level")
        .reset_index(drop=True)
    )


def sweep_is_monotone(summary: pd.DataFrame, tolerance: float = 0.001, max_violations: int = 1) -> bool:
    """Strict drop from first to last level; adjacent rises allowed only within ``tolerance`` (relative)."""
    values = summary["bce"].to_numpy()
    if values.size < 2 or not values[-1] < values[0]:
        return False
    rises = np.diff(values) / values[:-1]
    violations = rises > 0
    return bool(violations.sum() <= max_violations and np.all(rises[violations] <= tolerance))


def imputation_quality_study(
    config: ExperimentConfig,
    coverage: Optional[float] = None,
    seeds: Optional[Sequence[int]] = None,
    n_requests: Optional[int] = None,
) -> pd.DataFrame:
    """Exact versus nearest-neighbour-imputed embeddings at the same coverage.

    The same Bernoulli mask selects which labelled pairs carry an embedding;
    the imputed arm fills them with the teacher embedding of the user's most
    similar other user for the same item.
    """
    coverage = config.run.quality_coverage if coverage is None else coverage
    if not 0.0 <= coverage <= 1.0:
        raise ValidationError("coverage must lie in [0, 1]")
    seeds = list(config.run.seeds if seeds is None else seeds)

    def run_seed(seed: int) -> Dict[str, Any]:
        labeled = collect_labeled_set(config, seed, n_requests)
        world = generate_world(config.world.model_copy(update={"seed": seed}))
        teacher = create_default_teacher(world, config.teacher.d_emb)
        table = neighbor_table_from_embeddings(range(world.n_users), teacher.user_embeddings(), 1)
        nearest = np.array([table.neighbors_of(u)[0].user_id for u in range(world.n_users)], dtype=np.int64)
        imputed, _ = teacher.interaction_embeddings(nearest[labeled.users], labeled.items)
        present = labeled.mask_draws < coverage
        exact_bce = _progressive_bce(config, labeled, labeled.embeddings, present)
        imputed_bce = _progressive_bce(config, labeled, imputed, present)
        logger.info(f"Quality seed={seed} exact={exact_bce:.5f} imputed={imputed_bce:.5f}")
        return {
            "seed": seed,
            "coverage": coverage,
            "realized_coverage": float(present.mean()),
            "bce_exact": exact_bce,
            "bce_imputed": imputed_bce,
        }

    return pd.DataFrame(_map_seeds(config, seeds, run_seed))
