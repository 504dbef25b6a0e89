"""SOLARIS - speculative embedding precompute simulator.

Synthetic workload, teacher stand-in, TTL embedding cache, background
precompute, hierarchical enrichment and the online vertical model.
"""

from .config import ExperimentConfig, SolarisSettings, load_experiment_config
from .embed_cache import CacheKey, EmbedCache
from .enrichment import EmbeddingSource, Enricher, ImputationStrategy, NeighborTable
from .errors import ConfigError, SolarisError, UnknownIdError, ValidationError
from .metrics import ExperimentReport, compute_report, coverage_sweep
from .precompute import PrecomputeService
from .serving import VerticalModel, handle_request
from .synthetic_world import RankingRequest, World, WorldConfig, generate_world
from .teacher_model import CompressionMap, TeacherEmbedding, TeacherModel
from .verifier import Verifier, select_candidates

__all__ = [
    "CacheKey",
    "CompressionMap",
    "ConfigError",
    "EmbedCache",
    "EmbeddingSource",
    "Enricher",
    "ExperimentConfig",
    "ExperimentReport",
    "ImputationStrategy",
    "NeighborTable",
    "PrecomputeService",
    "RankingRequest",
    "SolarisError",
    "SolarisSettings",
    "TeacherEmbedding",
    "TeacherModel",
    "UnknownIdError",
    "ValidationError",
    "Verifier",
    "VerticalModel",
    "World",
    "WorldConfig",
    "compute_report",
    "coverage_sweep",
    "generate_world",
    "handle_request",
    "load_experiment_config",
    "select_candidates",
]
