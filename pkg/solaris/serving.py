"""Serving Path

Per-request feature assembly, online logistic-regression vertical model,
ranking and impression feedback. The serving path reads the cache and
enqueues misses; it never waits on the teacher.

Feature layout (``FeatureLayout.dim`` columns)::

    [0, B)              one-hot salted hash bucket of user_id
    [B, 2B)             one-hot salted hash bucket of item_id
    2B                  bias, always 1
    [2B+1, 2B+1+d)      user-item embedding (exact or imputed, else zeros)
    [2B+1+d, 2B+1+2d)   aggregated user embedding (else zeros)
    2B+1+2d             1 if the user-item slot is filled
    2B+2+2d             1 if the aggregate slot is filled
"""

import logging
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .enrichment import ABSENT, SOURCES, EmbeddingSource, EnrichedBatch, EnrichedFeature, Enricher
from .errors import ValidationError
from .synthetic_world import RankingRequest, World
from .tools.hashing import bucket

logger = logging.getLogger(__name__)


class ImpressionPolicy(str, Enum):
    """Which candidates of a request receive labels: the top of the model's
    ranking, or the first candidates in early-stage order."""

    REQUEST_ORDER = "request_order"
    MODEL_RANK = "model_rank"


@dataclass(frozen=True)
class FeatureLayout:
    hash_buckets: int = 64
    d_emb: int = 8
    salt: str = "solaris"

    def __post_init__(self):
        if self.hash_buckets < 1 or self.d_emb < 1:
            raise ValidationError("hash_buckets and d_emb must be at least 1")

    @property
    def bias_index(self) -> int:
        return 2 * self.hash_buckets

    @property
    def base_dim(self) -> int:
        return 2 * self.hash_buckets + 1

    @property
    def emb_offset(self) -> int:
        return self.base_dim

    @property
    def agg_offset(self) -> int:
        return self.base_dim + self.d_emb

    @property
    def flags_offset(self) -> int:
        return self.base_dim + 2 * self.d_emb

    @property
    def dim(self) -> int:
        return self.flags_offset + 2

    def user_index(self, user_id: int) -> int:
        return bucket(int(user_id), self.salt + ":user", self.hash_buckets)

    def item_index(self, item_id: int) -> int:
        return self.hash_buckets + bucket(int(item_id), self.salt + ":item", self.hash_buckets)

    def base(self, user_id: int, item_id: int) -> np.ndarray:
        base = np.zeros(self.base_dim)
        base[self.user_index(user_id)] = 1.0
        base[self.item_index(item_id)] = 1.0
        base[self.bias_index] = 1.0
        return base

    def describe(self) -> Dict[str, Any]:
        return {
            "user_buckets": [0, self.hash_buckets],
            "item_buckets": [self.hash_buckets, 2 * self.hash_buckets],
            "bias": self.bias_index,
            "user_item_emb": [self.emb_offset, self.agg_offset],
            "user_agg_emb": [self.agg_offset, self.flags_offset],
            "flags": [self.flags_offset, self.dim],
        }


@dataclass(frozen=True)
class FeatureVector:
    base: np.ndarray
    user_item_emb: np.ndarray
    user_agg_emb: np.ndarray
    presence_flags: Tuple[bool, bool]

    def to_array(self) -> np.ndarray:
        flags = np.array([float(self.presence_flags[0]), float(self.presence_flags[1])])
        return np.concatenate([self.base, self.user_item_emb, self.user_agg_emb, flags])

    def to_bytes(self) -> bytes:
        return self.to_array().astype("<f8").tobytes()


def assemble_features(
    enriched: EnrichedFeature, user_id: int, item_id: int, layout: FeatureLayout
) -> FeatureVector:
    """Lay out one pair's features; absent slots stay zero with their flag off."""
    if enriched.vector.shape != (layout.d_emb,) or enriched.user_agg.vector.shape != (layout.d_emb,):
        raise ValidationError(
            f"enriched vectors have shapes {enriched.vector.shape}/{enriched.user_agg.vector.shape}, "
            f"layout expects ({layout.d_emb},)"
        )
    filled = enriched.source is not EmbeddingSource.ABSENT
    return FeatureVector(
        base=layout.base(user_id, item_id),
        user_item_emb=np.array(enriched.vector, dtype=np.float64),
        user_agg_emb=np.array(enriched.user_agg.vector, dtype=np.float64),
        presence_flags=(filled, bool(enriched.user_agg.present)),
    )


def assemble_batch(batch: EnrichedBatch, user_id: int, layout: FeatureLayout) -> np.ndarray:
    """Feature matrix for a request, same layout as ``assemble_features``."""
    n = batch.item_ids.shape[0]
    if batch.vectors.shape != (n, layout.d_emb) or batch.agg_vectors.shape != (n, layout.d_emb):
        raise ValidationError(f"enriched batch does not match layout d_emb={layout.d_emb}")
    features = np.zeros((n, layout.dim))
    rows = np.arange(n)
    features[:, layout.user_index(user_id)] = 1.0
    features[rows, [layout.item_index(i) for i in batch.item_ids.tolist()]] = 1.0
    features[:, layout.bias_index] = 1.0
    features[:, layout.emb_offset : layout.agg_offset] = batch.vectors
    features[:, layout.agg_offset : layout.flags_offset] = batch.agg_vectors
    features[:, layout.flags_offset] = batch.sources != ABSENT
    features[:, layout.flags_offset + 1] = batch.agg_present
    return features


def _as_matrix(features: Union[FeatureVector, np.ndarray]) -> np.ndarray:
    x = features.to_array() if isinstance(features, FeatureVector) else np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("features contain non-finite values")
    return x


@dataclass(frozen=True)
class VerticalModel:
    """Online logistic regression over ``FeatureLayout`` vectors."""

    weights: np.ndarray
    learning_rate: float
    step_count: int = 0

    def __post_init__(self):
        weights = np.array(self.weights, dtype=np.float64)
        weights.flags.writeable = False
        object.__setattr__(self, "weights", weights)

    @classmethod
    def zeros(cls, dim: int, learning_rate: float) -> "VerticalModel":
        return cls(np.zeros(dim), learning_rate)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def scaled(self, factor: float) -> "VerticalModel":
        return replace(self, weights=self.weights * factor)


def predict(model: VerticalModel, features: Union[FeatureVector, np.ndarray]):
    """``sigmoid(w . x)``: a float for one vector, an array for a matrix."""
    x = _as_matrix(features)
    if x.shape[-1] != model.dim:
        raise ValidationError(f"features have {x.shape[-1]} columns, model expects {model.dim}")
    scores = expit(x @ model.weights)
    return float(scores) if x.ndim == 1 else scores


def bce_loss(model: VerticalModel, features: Union[FeatureVector, np.ndarray], label: int) -> float:
    p = predict(model, features)
    p = min(max(p, 1e-15), 1.0 - 1e-15)
    return float(-np.log(p)) if label else float(-np.log(1.0 - p))


def bce_gradient(model: VerticalModel, features: Union[FeatureVector, np.ndarray], label: int) -> np.ndarray:
    """Gradient of the BCE loss in the weights: ``(p - y) x``."""
    x = _as_matrix(features)
    return (predict(model, x) - label) * x


def sgd_update(model: VerticalModel, features: Union[FeatureVector, np.ndarray], label: int) -> VerticalModel:
    """One SGD step on the BCE loss; returns a new model."""
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label}")
    gradient = bce_gradient(model, features, label)
    return VerticalModel(
        weights=model.weights - model.learning_rate * gradient,
        learning_rate=model.learning_rate,
        step_count=model.step_count + 1,
    )


def train_online(
    model: VerticalModel, features: np.ndarray, labels: Sequence[int]
) -> Tuple[VerticalModel, np.ndarray]:
    """Progressive validation pass: score each row with the current weights, then step.

    Same arithmetic as repeated ``predict`` + ``sgd_update``; returns the
    trained model and the pre-update predictions.
    """
    features = _as_matrix(features)
    weights = model.weights.copy()
    rate = model.learning_rate
    predictions = np.empty(features.shape[0])
    for index, (x, y) in enumerate(zip(features, labels)):
        p = expit(x @ weights)
        predictions[index] = p
        weights -= rate * (p - y) * x
    trained = VerticalModel(weights, rate, model.step_count + features.shape[0])
    return trained, predictions


class ModelStore:
    """Single-writer commit point; readers always see a committed snapshot."""

    def __init__(self, model: VerticalModel):
        self._model = model
        self._lock = threading.Lock()

    def snapshot(self) -> VerticalModel:
        return self._model

    def commit(self, features: np.ndarray, labels: Sequence[int]) -> VerticalModel:
        """Apply one SGD step per ``(row, label)`` in order and publish the result."""
        with self._lock:
            model = self._model
            for x, y in zip(features, labels):
                model = sgd_update(model, x, int(y))
            self._model = model
            return model


@dataclass(frozen=True)
class ServingCosts:
    """Simulated serving-path cost per candidate and per request, in milliseconds."""

    lookup_ms: float = 0.02
    enrichment_ms: float = 0.05
    predict_ms: float = 0.01
    request_overhead_ms: float = 1.0

    def latency_seconds(self, n_candidates: int, with_cache: bool) -> float:
        per_candidate = self.predict_ms + (self.lookup_ms + self.enrichment_ms if with_cache else 0.0)
        return (self.request_overhead_ms + n_candidates * per_candidate) / 1000.0


@dataclass
class PipelineState:
    """Everything ``handle_request`` reads. ``enricher`` is ``None`` for the no-embedding arm."""

    world: World
    layout: FeatureLayout
    model_store: ModelStore
    enricher: Optional[Enricher] = None
    label_slate_n: int = 5
    impression_policy: ImpressionPolicy = ImpressionPolicy.MODEL_RANK
    costs: ServingCosts = field(default_factory=ServingCosts)


@dataclass
class ServingRecord:
    request_id: int
    user_id: int
    timestamp: float
    candidates: np.ndarray
    predictions: np.ndarray
    sources: np.ndarray
    agg_present: np.ndarray
    contributors: np.ndarray
    ranked: np.ndarray
    labeled_index: np.ndarray
    labels: np.ndarray
    labeled_predictions: np.ndarray
    serving_latency_sim: float

    @property
    def labeled_items(self) -> np.ndarray:
        return self.candidates[self.labeled_index]

    @property
    def labeled_sources(self) -> np.ndarray:
        return self.sources[self.labeled_index]

    @property
    def labeled_agg_present(self) -> np.ndarray:
        return self.agg_present[self.labeled_index]

    def source_counts(self) -> Dict[str, int]:
        counts = np.bincount(self.sources, minlength=len(SOURCES))
        return {source.value: int(count) for source, count in zip(SOURCES, counts)}

    def to_dict(self, detail: str = "summary") -> Dict[str, Any]:
        labeled = [
            {
                "item_id": int(item),
                "label": int(label),
                "prediction": float(p),
                "source": SOURCES[int(source)].value,
                "agg_present": bool(agg),
            }
            for item, label, p, source, agg in zip(
                self.labeled_items, self.labels, self.labeled_predictions,
                self.labeled_sources, self.labeled_agg_present,
            )
        ]
        record = {
            "request_id": int(self.request_id),
            "user_id": int(self.user_id),
            "timestamp": float(self.timestamp),
            "serving_latency_sim": float(self.serving_latency_sim),
            "source_counts": self.source_counts(),
            "agg_present": int(self.agg_present.sum()),
            "labeled": labeled,
        }
        if detail == "full":
            record["candidates"] = self.candidates.tolist()
            record["predictions"] = self.predictions.tolist()
            record["sources"] = [SOURCES[int(s)].value for s in self.sources]
            record["contributors"] = self.contributors.tolist()
            record["ranked"] = self.ranked.tolist()
        return record


def rank_candidates(candidates: np.ndarray, predictions: np.ndarray) -> np.ndarray:
    """Descending prediction, ties by ascending item id."""
    return candidates[np.lexsort((candidates, -predictions))]


def handle_request(request: RankingRequest, state: PipelineState) -> ServingRecord:
    """Serve one request: enrich, assemble, predict, rank, label, update.

    Args:
        request: The ranking request, served at its own timestamp
        state: World, layout, model store and optional enricher

    Returns:
        ServingRecord with pre-update predictions for the labelled slate

    Raises:
        UnknownIdError: The request names a user or item outside the world.
    """
    world = state.world
    world.check_user(request.user_id)
    candidates = world.check_items(request.candidates)
    now = request.timestamp

    if state.enricher is not None:
        batch = state.enricher.enrich_request(request, now)
    else:
        batch = EnrichedBatch.absent(candidates, state.layout.d_emb)
    features = assemble_batch(batch, request.user_id, state.layout)

    model = state.model_store.snapshot()
    predictions = predict(model, features)
    ranked = rank_candidates(candidates, predictions)

    slate = min(state.label_slate_n, candidates.shape[0])
    if state.impression_policy is ImpressionPolicy.MODEL_RANK:
        order = np.lexsort((candidates, -predictions))
        labeled_index = order[:slate]
    else:
        labeled_index = np.arange(slate)
    labels = world.true_labels(request.user_id, candidates[labeled_index], now)
    state.model_store.commit(features[labeled_index], labels)

    return ServingRecord(
        request_id=request.request_id,
        user_id=request.user_id,
        timestamp=now,
        candidates=candidates,
        predictions=predictions,
        sources=batch.sources,
        agg_present=batch.agg_present,
        contributors=batch.contributors,
        ranked=ranked,
        labeled_index=labeled_index,
        labels=labels,
        labeled_predictions=predictions[labeled_index],
        serving_latency_sim=state.costs.latency_seconds(candidates.shape[0], state.enricher is not None),
    )


def create_default_pipeline(world: World, learning_rate: float = 0.05, hash_buckets: int = 64, d_emb: int = 8) -> PipelineState:
    """No-embedding pipeline with a zero-weight model."""
    layout = FeatureLayout(hash_buckets=hash_buckets, d_emb=d_emb)
    return PipelineState(world=world, layout=layout, model_store=ModelStore(VerticalModel.zeros(layout.dim, learning_rate)))
