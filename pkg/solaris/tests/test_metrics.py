"""Tests for report computation and the offline coverage studies."""

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import log_loss

from solaris.config import ExperimentConfig, RunConfig
from solaris.embed_cache import CacheKey, EmbedCache
from solaris.enrichment import ABSENT, EXACT, IMPUTED
from solaris.errors import ValidationError
from solaris.metrics import (
    ExperimentReport,
    ReportAccumulator,
    bce,
    collect_labeled_set,
    compute_report,
    coverage_sweep,
    imputation_quality_study,
    relative_bce_reduction,
    summarize_sweep,
    sweep_is_monotone,
)
from solaris.serving import ServingRecord
from solaris.synthetic_world import WorldConfig
from solaris.teacher_model import TeacherEmbedding


def make_record(request_id=0, latency=0.002) -> ServingRecord:
    candidates = np.array([1, 2, 3, 4])
    predictions = np.array([0.8, 0.3, 0.6, 0.5])
    labeled_index = np.array([0, 1, 2])
    return ServingRecord(
        request_id=request_id,
        user_id=0,
        timestamp=float(request_id),
        candidates=candidates,
        predictions=predictions,
        sources=np.array([EXACT, IMPUTED, ABSENT, ABSENT], dtype=np.int8),
        agg_present=np.array([False, False, True, False]),
        contributors=np.array([0, 3, 0, 0]),
        ranked=np.array([1, 3, 4, 2]),
        labeled_index=labeled_index,
        labels=np.array([1, 0, 1], dtype=np.int8),
        labeled_predictions=predictions[labeled_index],
        serving_latency_sim=latency,
    )


@pytest.fixture
def small_config():
    return ExperimentConfig(
        world=WorldConfig(n_users=10, n_items=2000, candidates_per_request=20, seed=0),
        run=RunConfig(seeds=[0, 1], sweep_requests=200, sweep_levels=[0.0, 0.5, 1.0]),
    )


class TestLoss:
    def test_bce_matches_sklearn(self):
        labels = [1, 0, 1, 1]
        predictions = [0.9, 0.2, 0.6, 0.4]
        assert bce(labels, predictions) == pytest.approx(log_loss(labels, predictions))

    def test_bce_single_class(self):
        assert bce([1, 1], [0.5, 0.5]) == pytest.approx(np.log(2))

    def test_bce_empty(self):
        with pytest.raises(ValidationError):
            bce([], [])

    def test_relative_reduction(self):
        assert relative_bce_reduction(0.5, 0.4) == pytest.approx(20.0)
        assert relative_bce_reduction(0.5, 0.6) == pytest.approx(-20.0)
        with pytest.raises(ValidationError):
            relative_bce_reduction(0.0, 0.1)


class TestComputeReport:
    def test_coverage_over_labels_and_lookups(self):
        report = compute_report([make_record(0), make_record(1)])
        assert report.n_requests == 2
        assert (report.n_labeled, report.n_lookups) == (6, 8)
        assert report.coverage_exact == pytest.approx(1 / 3)
        assert report.coverage_effective == pytest.approx(2 / 3)
        assert report.coverage_any_signal == pytest.approx(1.0)
        assert report.lookup_coverage_exact == pytest.approx(0.25)
        assert report.lookup_coverage_effective == pytest.approx(0.5)
        assert report.lookup_coverage_any_signal == pytest.approx(0.75)
        assert report.source_counts == {"exact": 2, "similarity_imputed": 2, "absent": 2}
        assert report.neighbor_contributors == {"3": 2}
        assert report.bce == pytest.approx(log_loss([1, 0, 1] * 2, [0.8, 0.3, 0.6] * 2))
        assert report.label_rate == pytest.approx(2 / 3)

    def test_latency_summary(self):
        report = compute_report([make_record(0, 0.001), make_record(1, 0.003)])
        assert report.serving_latency_sim["mean"] == pytest.approx(0.002)
        assert report.serving_latency_sim["max"] == pytest.approx(0.003)

    def test_baseline_comparison(self):
        report = compute_report([make_record()], baseline_bce=1.0, arm="treatment")
        assert report.baseline_arm == "baseline"
        assert report.relative_bce_reduction_pct == pytest.approx((1.0 - report.bce) * 100)

    def test_cache_stats_and_config_attached(self, small_config):
        cache = EmbedCache(d_emb=8)
        cache.put(CacheKey(0, 1), TeacherEmbedding(np.zeros(8), 0.0), 0.0)
        cache.get(CacheKey(0, 1), 10.0, 60.0)
        report = ReportAccumulator("treatment").extend([make_record()]).report(cache.stats(), small_config)
        assert report.hit_rate == 1.0
        assert report.freshness_histogram["le_0.25h"] == 1
        assert report.config_digest == small_config.digest()
        assert report.config["world"]["n_users"] == 10
        assert "note" in report.to_dict()

    def test_empty_records(self):
        with pytest.raises(ValidationError):
            compute_report([])

    def test_coverage_chain_enforced(self):
        with pytest.raises(ValidationError):
            ExperimentReport(
                arm="x", n_requests=1, n_lookups=1, n_labeled=1,
                coverage_exact=0.6, coverage_effective=0.5, coverage_any_signal=0.7,
                lookup_coverage_exact=0.0, lookup_coverage_effective=0.0, lookup_coverage_any_signal=0.0,
                bce=0.5, label_rate=0.5, source_counts={}, lookup_source_counts={},
                neighbor_contributors={}, serving_latency_sim={},
            )


class TestCoverageSweep:
    def test_labeled_set(self, small_config):
        labeled = collect_labeled_set(small_config, seed=0, n_requests=50)
        assert len(labeled) == 250
        assert labeled.embeddings.shape == (250, 8)
        assert set(np.unique(labeled.labels).tolist()) <= {0, 1}

    def test_sweep_shape_and_anchors(self, small_config):
        table = coverage_sweep(small_config)
        assert len(table) == 6
        assert list(table.columns) == [
            "seed", "coverage_level", "realized_coverage", "n_labeled", "bce",
            "baseline_bce", "relative_bce_reduction_pct",
        ]
        zero = table[table.coverage_level == 0.0]
        assert (zero.realized_coverage == 0.0).all()
        assert (zero.bce == zero.baseline_bce).all()
        assert (table[table.coverage_level == 1.0].realized_coverage == 1.0).all()
        for _, rows in table.groupby("seed"):
            assert rows.realized_coverage.is_monotonic_increasing

    def test_sweep_is_deterministic_across_modes(self, small_config):
        sequential = coverage_sweep(small_config, [0.0, 1.0], n_requests=100)
        threaded_config = small_config.with_updates(run={"deterministic_mode": False})
        threaded = coverage_sweep(threaded_config, [0.0, 1.0], n_requests=100)
        pd.testing.assert_frame_equal(sequential, threaded)

    def test_bad_levels(self, small_config):
        with pytest.raises(ValidationError):
            coverage_sweep(small_config, [0.5, 0.2])
        with pytest.raises(ValidationError):
            coverage_sweep(small_config, [0.0, 1.5])

    def test_summary(self, small_config):
        summary = summarize_sweep(coverage_sweep(small_config, n_requests=100))
        assert summary.coverage_level.tolist() == [0.0, 0.5, 1.0]
        assert (summary.seeds == 2).all()

    def test_quality_study(self, small_config):
        table = imputation_quality_study(small_config, coverage=0.5, n_requests=100)
        assert table.seed.tolist() == [0, 1]
        assert (table.bce_exact > 0).all() and (table.bce_imputed > 0).all()
        assert table.realized_coverage.between(0.3, 0.7).all()


class TestMonotoneCheck:
    @pytest.mark.parametrize(
        "values, expected",
        [
            ([1.0, 0.9, 0.8, 0.7], True),
            ([1.0, 0.9, 0.9005, 0.8], True),
            ([1.0, 0.9, 0.95, 0.8], False),
            ([1.0, 0.9, 0.9005, 0.85, 0.8505], False),
            ([1.0, 0.9, 1.0], False),
        ],
    )
    def test_tolerance(self, values, expected):
        assert sweep_is_monotone(pd.DataFrame({"bce": values})) is expected
