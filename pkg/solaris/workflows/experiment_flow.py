"""Experiment Flow Orchestrator
This module wires the pipeline end to end for one run: world and trace,
teacher, cache, precompute, enrichment and serving, then the report. It
drives the paired baseline/treatment simulation, the enrichment ablation
grid and the offline coverage sweep.
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from ..config import ExperimentConfig
from ..embed_cache import EmbedCache
from ..enrichment import Enricher, NeighborTable, build_neighbor_table
from ..errors import SolarisError
from ..metrics import (
    ExperimentReport,
    ReportAccumulator,
    coverage_sweep,
    imputation_quality_study,
    summarize_sweep,
    sweep_is_monotone,
)
from ..precompute import PrecomputeService
from ..serving import ModelStore, PipelineState, VerticalModel, handle_request
from ..synthetic_world import RankingRequest, World, export_requests, generate_world, import_requests
from ..teacher_model import CompressionMap, TeacherModel
from ..tools.jsonl import JsonlWriter
from ..verifier import Verifier

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class FlowStage(str, Enum):
    """Stages of one simulated arm."""
    SETUP = "setup"
    SERVE = "serve"
    REPORT = "report"
    COMPLETE = "complete"


class FlowStatus(str, Enum):
    """Status of a flow execution."""
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    SUCCESS = "success"
    FAILED = "failed"


@dataclass(frozen=True)
class ArmSpec:
    """One pipeline variant. ``use_embeddings=False`` is the no-embedding baseline."""
    name: str
    use_embeddings: bool = True
    enable_agg: bool = True
    enable_similarity: bool = True


BASELINE_ARM = ArmSpec("baseline", use_embeddings=False, enable_agg=False, enable_similarity=False)

ABLATION_ARMS = (
    ArmSpec("none", enable_agg=False, enable_similarity=False),
    ArmSpec("+agg", enable_agg=True, enable_similarity=False),
    ArmSpec("+similarity", enable_agg=False, enable_similarity=True),
    ArmSpec("+both", enable_agg=True, enable_similarity=True),
)


def treatment_arm(config: ExperimentConfig) -> ArmSpec:
    return ArmSpec(
        "treatment",
        enable_agg=config.enrichment.enable_agg,
        enable_similarity=config.enrichment.enable_similarity,
    )


@dataclass
class FlowSinks:
    """Optional audit writers shared by the arms of one run."""
    records: Optional[JsonlWriter] = None
    cycles: Optional[JsonlWriter] = None
    decisions: Optional[JsonlWriter] = None

    def close(self) -> None:
        for writer in (self.records, self.cycles, self.decisions):
            if writer is not None:
                writer.close()


@dataclass
class FlowContext:
    """Context object passed through the stages of one arm."""
    flow_id: str
    arm: ArmSpec
    stage: FlowStage = FlowStage.SETUP
    status: FlowStatus = FlowStatus.PENDING
    state: Optional[PipelineState] = None
    cache: Optional[EmbedCache] = None
    service: Optional[PrecomputeService] = None
    verifier: Optional[Verifier] = None
    report: Optional[ExperimentReport] = None
    errors: List[str] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)


class ExperimentFlow:
    """Runs pipeline arms over one shared world and request trace.

    The world, teacher, trace and neighbour table are built once and reused
    by every arm, so arms differ only in what they are configured to do.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        requests: Optional[Sequence[RankingRequest]] = None,
        world: Optional[World] = None,
    ):
        self.config = config
        self.world = world or generate_world(config.world)
        self.teacher = TeacherModel(self.world, self._compression_map())
        if requests is None:
            requests = self.world.request_stream().take(config.run.n_requests)
        self.requests = list(requests)
        if not self.requests:
            raise SolarisError("request trace is empty")
        self.warmup = int(len(self.requests) * config.run.warmup_fraction)
        self._table: Optional[NeighborTable] = None
        self.active_flows: Dict[str, FlowContext] = {}

    def _compression_map(self) -> CompressionMap:
        path = self.config.teacher.compression_map_path
        if path:
            logger.info(f"Loading compression map from {path}")
            return CompressionMap.load(path)
        return CompressionMap.from_seed(self.world.seed, self.world.d_lat, self.config.teacher.d_emb)

    @property
    def neighbor_table(self) -> NeighborTable:
        if self._table is None:
            users = range(self.world.n_users)
            self._table = build_neighbor_table(users, self.teacher, self.config.enrichment.k_neighbors)
        return self._table

    def start_flow(self, arm: ArmSpec) -> FlowContext:
        context = FlowContext(flow_id=f"{arm.name}-seed{self.world.seed}", arm=arm)
        self.active_flows[context.flow_id] = context
        logger.info(f"Starting flow {context.flow_id} over {len(self.requests)} requests")
        return context

    def execute_flow(self, context: FlowContext, sinks: Optional[FlowSinks] = None) -> FlowContext:
        """Set up, serve the whole trace and report. Failures mark the context FAILED."""
        sinks = sinks or FlowSinks()
        context.status = FlowStatus.IN_PROGRESS
        try:
            context = self._setup(context, sinks)
            context.stage = FlowStage.SERVE
            accumulator = self._serve(context, sinks)
            context.stage = FlowStage.REPORT
            cache_stats = context.cache.stats() if context.cache is not None else None
            context.report = accumulator.report(cache_stats, self.config)
            context.stage = FlowStage.COMPLETE
            context.status = FlowStatus.SUCCESS
            logger.info(
                f"Flow {context.flow_id} completed: bce={context.report.bce:.5f} "
                f"exact={context.report.coverage_exact:.3f} effective={context.report.coverage_effective:.3f} "
                f"any={context.report.coverage_any_signal:.3f}"
            )
        except Exception as e:
            logger.error(f"Flow {context.flow_id} failed at {context.stage.value}: {e}")
            context.status = FlowStatus.FAILED
            context.errors.append(str(e))
        finally:
            if context.service is not None:
                context.service.close()
        return context

    def _setup(self, context: FlowContext, sinks: FlowSinks) -> FlowContext:
        config = self.config
        layout = config.serving.layout(config.teacher.d_emb)
        state = PipelineState(
            world=self.world,
            layout=layout,
            model_store=ModelStore(VerticalModel.zeros(layout.dim, config.serving.learning_rate)),
            label_slate_n=config.serving.label_slate_n,
            impression_policy=config.serving.impression_policy,
            costs=config.serving.costs(),
        )
        if context.arm.use_embeddings:
            cache = EmbedCache(
                d_emb=config.teacher.d_emb,
                capacity=config.cache.capacity,
                retention_seconds=config.cache.retention_seconds,
                policy=config.cache.eviction_policy,
            )
            service = PrecomputeService(
                cache,
                self.teacher,
                config.precompute,
                ttl_seconds=config.cache.ttl_seconds,
                deterministic=config.run.deterministic_mode,
                sink=sinks.cycles,
            )
            state.enricher = Enricher(
                cache,
                self.neighbor_table if context.arm.enable_similarity else None,
                ttl_seconds=config.cache.ttl_seconds,
                strategy=config.enrichment.strategy,
                enable_agg=context.arm.enable_agg,
                enable_similarity=context.arm.enable_similarity,
                agg_window_seconds=config.enrichment.agg_window_hours * 3600.0,
                requeue=service.requeue_miss,
            )
            context.cache = cache
            context.service = service
            context.verifier = Verifier(
                config.verifier.fraction, config.verifier.evict_on_reject, sink=sinks.decisions
            )
        context.state = state
        return context

    def _serve(self, context: FlowContext, sinks: FlowSinks) -> ReportAccumulator:
        run = self.config.run
        accumulator = ReportAccumulator(context.arm.name)
        service, cache, verifier = context.service, context.cache, context.verifier
        for index, request in enumerate(self.requests):
            now = request.timestamp
            if service is not None:
                service.run_due_cycles(now)
                cache.compact(now, request.user_id)
            record = handle_request(request, context.state)
            if service is not None:
                decision = verifier.decide(request, record.predictions)
                service.speculate(request, decision, now, evict_rejected=verifier.evict_on_reject)
            measured = index >= self.warmup
            if measured:
                accumulator.add(record)
            if sinks.records is not None and run.record_detail != "none":
                entry = record.to_dict(run.record_detail)
                entry["arm"] = context.arm.name
                entry["warmup"] = not measured
                sinks.records.write(entry)
            if (index + 1) % run.progress_every == 0:
                logger.info(f"Flow {context.flow_id}: served {index + 1}/{len(self.requests)} requests")
        if service is not None:
            context.metadata["precompute"] = service.totals()
        return accumulator


def run_arm(flow: ExperimentFlow, arm: ArmSpec, sinks: Optional[FlowSinks] = None) -> FlowContext:
    """Execute one arm; raises when it failed."""
    context = flow.execute_flow(flow.start_flow(arm), sinks)
    if context.status is FlowStatus.FAILED:
        raise SolarisError(f"arm {arm.name} failed: {'; '.join(context.errors)}")
    return context


def _write_json(path: Path, payload: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_paired_simulation(
    config: ExperimentConfig, output_dir: PathLike, trace_path: Optional[PathLike] = None
) -> Dict[str, ExperimentReport]:
    """Baseline and treatment over the identical trace; writes every run artifact to ``output_dir``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    requests = import_requests(trace_path) if trace_path is not None else None
    flow = ExperimentFlow(config, requests=requests)
    if config.run.export_trace:
        export_requests(out / "requests.jsonl", flow.requests)

    sinks = FlowSinks(
        records=JsonlWriter(out / "records.jsonl") if config.run.record_detail != "none" else None,
        cycles=JsonlWriter(out / "cycles.jsonl"),
        decisions=JsonlWriter(out / "decisions.jsonl") if config.run.log_decisions else None,
    )
    try:
        baseline = run_arm(flow, BASELINE_ARM, sinks)
        treatment = run_arm(flow, treatment_arm(config), sinks)
    finally:
        sinks.close()

    treatment.report.against(baseline.report.bce, BASELINE_ARM.name)
    _write_json(out / "report.json", {
        "baseline": baseline.report.to_dict(),
        "treatment": treatment.report.to_dict(),
        "precompute": treatment.metadata.get("precompute", {}),
        "trace": {"requests": len(flow.requests), "warmup_requests": flow.warmup},
    })
    pd.DataFrame([baseline.report.summary_row(), treatment.report.summary_row()]).to_csv(
        out / "report.csv", index=False
    )
    treatment.cache.write_prometheus(out / "metrics.prom")
    flow.teacher.compression_map.save(out / "compression_map.json")
    if treatment_arm(config).enable_similarity:
        flow.neighbor_table.save(out / "neighbors.json")
    logger.info(
        f"Simulation finished: baseline bce={baseline.report.bce:.5f} treatment bce={treatment.report.bce:.5f} "
        f"reduction={treatment.report.relative_bce_reduction_pct:.3f}%"
    )
    return {"baseline": baseline.report, "treatment": treatment.report}


def run_ablation(config: ExperimentConfig, output_dir: PathLike) -> pd.DataFrame:
    """Enrichment ablation grid plus the no-embedding baseline; writes ``ablation.csv`` and ``ablation.json``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    flow = ExperimentFlow(config)
    baseline = run_arm(flow, BASELINE_ARM).report
    reports = [baseline]
    for arm in ABLATION_ARMS:
        reports.append(run_arm(flow, arm).report.against(baseline.bce, BASELINE_ARM.name))
    table = pd.DataFrame([report.summary_row() for report in reports])
    table.to_csv(out / "ablation.csv", index=False)
    _write_json(out / "ablation.json", {report.arm: report.to_dict() for report in reports})
    return table


def run_sweep(
    config: ExperimentConfig,
    output_dir: PathLike,
    levels: Optional[Sequence[float]] = None,
    quality: bool = False,
) -> Dict[str, pd.DataFrame]:
    """Coverage sweep to ``sweep.csv`` and ``sweep_summary.csv``; ``quality.csv`` with ``quality``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = coverage_sweep(config, levels)
    summary = summarize_sweep(table)
    table.to_csv(out / "sweep.csv", index=False)
    summary.to_csv(out / "sweep_summary.csv", index=False)
    if sweep_is_monotone(summary):
        logger.info("Seed-averaged BCE decreases with coverage")
    else:
        logger.warning("Seed-averaged BCE is not monotone in coverage")
    results = {"sweep": table, "summary": summary}
    if quality:
        results["quality"] = imputation_quality_study(config)
        results["quality"].to_csv(out / "quality.csv", index=False)
    return results
