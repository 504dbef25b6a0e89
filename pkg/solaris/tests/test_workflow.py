import json
from unittest.mock import patch

import numpy as np
import pytest

from solaris.config import SMOKE_CONFIG_PATH, load_experiment_config
from solaris.errors import SolarisError
from solaris.synthetic_world import RankingRequest
from solaris.tools.jsonl import read_jsonl
from solaris.workflows.experiment_flow import (
    ABLATION_ARMS,
    BASELINE_ARM,
    ExperimentFlow,
    FlowStage,
    FlowStatus,
    run_ablation,
    run_arm,
    run_paired_simulation,
    run_sweep,
    treatment_arm,
)


class TestExperimentWorkflow:
    """End-to-end runs of the simulated pipeline on a small world."""

    @pytest.fixture
    def config(self):
        """Smoke config shrunk to a few hundred requests."""
        return load_experiment_config(SMOKE_CONFIG_PATH).with_updates(
            run={"n_requests": 400, "progress_every": 100},
            enrichment={"k_neighbors": 5},
        )

    @pytest.fixture
    def flow(self, config):
        return ExperimentFlow(config)

    def test_flow_shares_world_and_trace(self, flow, config):
        assert len(flow.requests) == 400
        assert flow.warmup == 80
        assert flow.world.seed == config.world.seed
        timestamps = [r.timestamp for r in flow.requests]
        assert timestamps == sorted(timestamps)

    def test_baseline_arm_never_sees_embeddings(self, flow):
        context = run_arm(flow, BASELINE_ARM)
        report = context.report
        assert context.status is FlowStatus.SUCCESS
        assert context.stage is FlowStage.COMPLETE
        assert context.cache is None
        assert report.n_requests == 320
        assert report.coverage_exact == report.coverage_any_signal == 0.0
        assert report.source_counts["absent"] == report.n_labeled
        assert report.hit_rate == 0.0

    def test_treatment_arm_fills_the_cache(self, flow, config):
        context = run_arm(flow, treatment_arm(config))
        report = context.report
        totals = context.metadata["precompute"]
        assert totals["cycles"] > 0
        assert totals["embeddings_written"] > 0
        assert report.lookup_coverage_exact > 0.0
        assert report.coverage_exact <= report.coverage_effective <= report.coverage_any_signal
        assert report.cache_stats["lookups"] >= report.n_lookups
        assert report.config_digest == config.digest()

    def test_ablation_arm_relationships(self, flow):
        reports = {arm.name: run_arm(flow, arm).report for arm in ABLATION_ARMS}
        none, agg, sim = reports["none"], reports["+agg"], reports["+similarity"]
        assert none.coverage_exact == none.coverage_effective == none.coverage_any_signal
        assert agg.coverage_effective == agg.coverage_exact
        assert agg.source_counts["similarity_imputed"] == 0
        assert sim.coverage_any_signal == sim.coverage_effective
        assert sim.lookup_coverage_effective > sim.lookup_coverage_exact
        assert reports["+both"].coverage_any_signal >= reports["+both"].coverage_effective

    def test_failed_arm_is_reported(self, flow):
        with patch("solaris.workflows.experiment_flow.handle_request", side_effect=RuntimeError("boom")):
            context = flow.execute_flow(flow.start_flow(BASELINE_ARM))
        assert context.status is FlowStatus.FAILED
        assert context.stage is FlowStage.SERVE
        assert context.errors == ["boom"]

    def test_unknown_user_in_trace_fails_the_arm(self, config):
        requests = [RankingRequest(0, 999, 0.0, np.arange(40))]
        flow = ExperimentFlow(config, requests=requests)
        with pytest.raises(SolarisError):
            run_arm(flow, BASELINE_ARM)

    def test_empty_trace(self, config):
        with pytest.raises(SolarisError):
            ExperimentFlow(config, requests=[])


class TestRunArtifacts:
    """Files written by the paired simulation, ablation and sweep."""

    @pytest.fixture
    def config(self):
        return load_experiment_config(SMOKE_CONFIG_PATH).with_updates(
            run={"n_requests": 300, "progress_every": 100, "export_trace": True, "log_decisions": True},
            enrichment={"k_neighbors": 5},
        )

    def test_paired_simulation_writes_every_artifact(self, config, tmp_path):
        reports = run_paired_simulation(config, tmp_path)
        for name in (
            "report.json", "report.csv", "metrics.prom", "compression_map.json", "neighbors.json",
            "requests.jsonl", "records.jsonl", "cycles.jsonl", "decisions.jsonl",
        ):
            assert (tmp_path / name).exists(), name
        payload = json.loads((tmp_path / "report.json").read_text())
        assert set(payload) == {"baseline", "treatment", "precompute", "trace"}
        assert payload["trace"] == {"requests": 300, "warmup_requests": 60}
        assert payload["treatment"]["baseline_bce"] == pytest.approx(reports["baseline"].bce)
        records = list(read_jsonl(tmp_path / "records.jsonl"))
        assert len(records) == 600
        assert sum(r["warmup"] for r in records) == 120
        assert {r["arm"] for r in records} == {"baseline", "treatment"}
        assert "solaris_cache_lookups_total" in (tmp_path / "metrics.prom").read_text()

    def test_report_is_reproducible(self, config, tmp_path):
        run_paired_simulation(config, tmp_path / "a")
        run_paired_simulation(config, tmp_path / "b")
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
        assert (tmp_path / "a" / "records.jsonl").read_bytes() == (tmp_path / "b" / "records.jsonl").read_bytes()

    def test_replayed_trace_gives_same_report(self, config, tmp_path):
        run_paired_simulation(config, tmp_path / "a")
        quiet = config.with_updates(run={"export_trace": False})
        run_paired_simulation(quiet, tmp_path / "b", trace_path=tmp_path / "a" / "requests.jsonl")
        first = json.loads((tmp_path / "a" / "report.json").read_text())
        second = json.loads((tmp_path / "b" / "report.json").read_text())
        assert first["treatment"]["bce"] == second["treatment"]["bce"]
        assert first["baseline"]["bce"] == second["baseline"]["bce"]

    def test_serving_latency_is_independent_of_worker_cost(self, config, tmp_path):
        latencies, worker_times = [], []
        for cost in (0.0, 50.0, 5000.0):
            updated = config.with_updates(precompute={"per_embedding_cost_ms": cost})
            reports = run_paired_simulation(updated, tmp_path / str(cost))
            latencies.append(reports["treatment"].serving_latency_sim)
            payload = json.loads((tmp_path / str(cost) / "report.json").read_text())
            worker_times.append(payload["precompute"]["simulated_worker_time"])
        assert latencies[0] == latencies[1] == latencies[2]
        assert worker_times[0] == 0.0
        assert worker_times[1] > 0.0

    def test_no_records_when_detail_is_none(self, config, tmp_path):
        run_paired_simulation(config.with_updates(run={"record_detail": "none"}), tmp_path)
        assert not (tmp_path / "records.jsonl").exists()

    def test_ablation_table(self, config, tmp_path):
        table = run_ablation(config, tmp_path)
        assert table.arm.tolist() == ["baseline", "none", "+agg", "+similarity", "+both"]
        assert table.relative_bce_reduction_pct.iloc[1:].notna().all()
        assert (tmp_path / "ablation.csv").exists()
        assert set(json.loads((tmp_path / "ablation.json").read_text())) == set(table.arm)

    def test_sweep_files(self, config, tmp_path):
        small = config.with_updates(run={"sweep_requests": 100})
        results = run_sweep(small, tmp_path, levels=[0.0, 0.2, 0.5, 1.0], quality=True)
        assert len(results["sweep"]) == 4
        assert len(results["summary"]) == 4
        for name in ("sweep.csv", "sweep_summary.csv", "quality.csv"):
            assert (tmp_path / name).exists()
