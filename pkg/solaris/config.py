"""Experiment Configuration

Pydantic schema for experiment files (JSON or YAML), the loader with
line-level diagnostics, and process settings read from the environment.
Unknown keys are rejected everywhere.
"""

import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .embed_cache import EvictionPolicy
from .enrichment import ImputationStrategy
from .errors import ConfigError
from .serving import FeatureLayout, ImpressionPolicy, ServingCosts
from .synthetic_world import WorldConfig
from .tools.hashing import config_digest

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "configs"
DEFAULT_CONFIG_PATH = CONFIG_DIR / "default_experiment.yaml"
SMOKE_CONFIG_PATH = CONFIG_DIR / "smoke_experiment.json"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TeacherConfig(_Section):
    """Foundation-model stand-in."""

    d_emb: int = Field(8, ge=1, description="Compressed embedding dimension")
    compression_map_path: Optional[str] = Field(
        None, description="Reuse a saved projection instead of drawing one from the seed"
    )


class CacheConfig(_Section):
    ttl_hours: float = Field(5.0, gt=0.0, description="Read TTL; age <= ttl is fresh")
    capacity: Optional[int] = Field(4_000_000, ge=1, description="Physical entry limit, null for unbounded")
    retention_hours: Optional[float] = Field(24.0, gt=0.0, description="Compaction horizon")
    eviction_policy: EvictionPolicy = EvictionPolicy.LRU

    @property
    def ttl_seconds(self) -> float:
        return self.ttl_hours * 3600.0

    @property
    def retention_seconds(self) -> Optional[float]:
        return None if self.retention_hours is None else self.retention_hours * 3600.0


class VerifierConfig(_Section):
    fraction: float = Field(0.2, gt=0.0, le=1.0, description="Share of each request sent to speculation")
    evict_on_reject: bool = Field(False, description="Invalidate cached pairs the verifier rejects")


class WorkerConfig(_Section):
    """Background precompute workers."""

    worker_count: int = Field(2, ge=1)
    per_embedding_cost_ms: float = Field(50.0, ge=0.0, description="Simulated teacher cost per embedding")
    cycle_period_seconds: float = Field(60.0, gt=0.0)
    queue_capacity: int = Field(200_000, ge=1)
    dedup_window_seconds: float = Field(300.0, ge=0.0)
    refresh_skip_fraction: float = Field(0.5, ge=0.0, le=1.0)

    @property
    def per_embedding_cost_seconds(self) -> float:
        return self.per_embedding_cost_ms / 1000.0


class EnrichmentConfig(_Section):
    k_neighbors: int = Field(100, ge=1)
    strategy: ImputationStrategy = ImputationStrategy.NEAREST_SINGLE
    enable_agg: bool = True
    enable_similarity: bool = True
    agg_window_hours: float = Field(24.0, gt=0.0)


class ServingConfig(_Section):
    learning_rate: float = Field(0.05, ge=0.0)
    label_slate_n: int = Field(5, ge=1)
    hash_buckets: int = Field(64, ge=1)
    hash_salt: str = "solaris"
    impression_policy: ImpressionPolicy = ImpressionPolicy.MODEL_RANK
    lookup_cost_ms: float = Field(0.02, ge=0.0)
    enrichment_cost_ms: float = Field(0.05, ge=0.0)
    predict_cost_ms: float = Field(0.01, ge=0.0)
    request_overhead_ms: float = Field(1.0, ge=0.0)

    def layout(self, d_emb: int) -> FeatureLayout:
        return FeatureLayout(hash_buckets=self.hash_buckets, d_emb=d_emb, salt=self.hash_salt)

    def costs(self) -> ServingCosts:
        return ServingCosts(
            lookup_ms=self.lookup_cost_ms,
            enrichment_ms=self.enrichment_cost_ms,
            predict_ms=self.predict_cost_ms,
            request_overhead_ms=self.request_overhead_ms,
        )


class RunConfig(_Section):
    n_requests: int = Field(50_000, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    deterministic_mode: bool = True
    warmup_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    sweep_requests: int = Field(20_000, ge=1, description="Requests per seed in the coverage sweep")
    sweep_levels: List[float] = Field(default_factory=lambda: [0.0, 0.2, 0.5, 0.6, 1.0], min_length=1)
    quality_coverage: float = Field(0.5, ge=0.0, le=1.0)
    record_detail: Literal["none", "summary", "full"] = "summary"
    log_decisions: bool = False
    export_trace: bool = False
    progress_every: int = Field(10_000, ge=1)

    @field_validator("sweep_levels")
    @classmethod
    def validate_levels(cls, levels: List[float]) -> List[float]:
        if any(not 0.0 <= level <= 1.0 for level in levels):
            raise ValueError("coverage levels must lie in [0, 1]")
        if list(levels) != sorted(levels):
            raise ValueError("coverage levels must be sorted")
        return levels

    @property
    def warmup_requests(self) -> int:
        return int(self.n_requests * self.warmup_fraction)


class ExperimentConfig(_Section):
    """Root of an experiment file."""

    world: WorldConfig = Field(default_factory=WorldConfig)
    teacher: TeacherConfig = Field(default_factory=TeacherConfig)
    cache: CacheConfig = Field(default_factory=CacheConfig)
    verifier: VerifierConfig = Field(default_factory=VerifierConfig)
    precompute: WorkerConfig = Field(default_factory=WorkerConfig)
    enrichment: EnrichmentConfig = Field(default_factory=EnrichmentConfig)
    serving: ServingConfig = Field(default_factory=ServingConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def validate_coherence(self):
        if self.world.candidates_per_request > self.world.n_items:
            raise ValueError("world.candidates_per_request exceeds world.n_items")
        if self.serving.label_slate_n > self.world.candidates_per_request:
            raise ValueError("serving.label_slate_n exceeds world.candidates_per_request")
        if self.enrichment.enable_similarity and self.world.n_users < 2:
            raise ValueError("similarity imputation needs at least two users")
        if self.teacher.d_emb > 3 * self.world.d_lat:
            raise ValueError("teacher.d_emb exceeds the raw interaction dimension 3 * world.d_lat")
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with the world seed and the seed list replaced by ``seed``."""
        payload = self.to_payload()
        payload["world"]["seed"] = seed
        payload["run"]["seeds"] = [seed]
        return ExperimentConfig.model_validate(payload)

    def with_updates(self, **sections: Dict[str, Any]) -> "ExperimentConfig":
        """Copy with the given section fields overridden, re-validated."""
        payload = self.to_payload()
        for section, values in sections.items():
            payload[section].update(values)
        return ExperimentConfig.model_validate(payload)

    def to_payload(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        return config_digest(self.to_payload())


class SolarisSettings(BaseSettings):
    """Process settings from ``SOLARIS_*`` environment variables or ``.env``."""

    model_config = SettingsConfigDict(env_prefix="SOLARIS_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    output_dir: Optional[str] = None
    config: Optional[str] = None


def _locate(text: str, loc: Sequence[Union[str, int]]) -> Optional[int]:
    """1-based line where the dotted key path ``loc`` appears in ``text``."""
    lines = text.splitlines()
    start = 0
    found = None
    for part in loc:
        if not isinstance(part, str):
            continue
        pattern = re.compile(r'^\s*"?' + re.escape(part) + r'"?\s*:')
        for index in range(start, len(lines)):
            if pattern.search(lines[index]):
                found, start = index + 1, index + 1
                break
        else:
            return found
    return found


def _parse(path: Path, text: str) -> Any:
    suffix = path.suffix.lower()
    if suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"cannot parse {path}", [f"{path}:{e.lineno}:{e.colno}: {e.msg}"]) from e
    if suffix in (".yaml", ".yml"):
        try:
            return yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark is not None else str(path)
            problem = getattr(e, "problem", None) or str(e)
            raise ConfigError(f"cannot parse {path}", [f"{where}: {problem}"]) from e
    raise ConfigError(f"unsupported config format {suffix!r}", [f"{path}: use .json, .yaml or .yml"])


def validate_experiment_config(payload: Any, source: str = "<config>", text: str = "") -> ExperimentConfig:
    """Validate a parsed payload, turning schema errors into a ``ConfigError``."""
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError(f"invalid config {source}", [f"{source}: top level must be a mapping"])
    try:
        return ExperimentConfig.model_validate(payload)
    except PydanticValidationError as e:
        diagnostics = []
        for error in e.errors():
            dotted = ".".join(str(part) for part in error["loc"]) or "<root>"
            line = _locate(text, error["loc"]) if text else None
            where = f"{source}:{line}" if line else source
            diagnostics.append(f"{where}: {dotted}: {error['msg']}")
        raise ConfigError(f"invalid config {source}", diagnostics) from e


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate an experiment file.

    Raises:
        ConfigError: unreadable file, syntax error or schema violation; the
            diagnostics carry file and line where known.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read {path}", [f"{path}: {e.strerror or e}"]) from e
    config = validate_experiment_config(_parse(path, text), str(path), text)
    logger.debug(f"Loaded config {path} digest={config.digest()[:12]}")
    return config


def create_default_config() -> ExperimentConfig:
    return load_experiment_config(DEFAULT_CONFIG_PATH)
