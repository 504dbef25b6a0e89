"""Verifier

Decides which candidates of a request earn speculative precomputation: the
top ``ceil(fraction * n)`` by the current vertical model's score, ties broken
by ascending item id. Rejected pairs are never enqueued.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .enrichment import EnrichedFeature
from .errors import ValidationError
from .serving import FeatureLayout, VerticalModel, assemble_features, predict
from .synthetic_world import RankingRequest, World

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VerifierDecision:
    request_id: int
    selected: Tuple[int, ...]
    rejected: Tuple[int, ...]
    fraction_used: float

    def to_dict(self) -> Dict[str, Any]:
        return {"request_id": self.request_id, "selected": list(self.selected), "fraction": self.fraction_used}


def selected_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)``, clamped to ``[1, n]`` for non-empty requests.

    Products within 1e-9 above an integer snap down to it, so ``0.1 * 30``
    keeps 3 rather than 4.
    """
    if n <= 0:
        return 0
    return min(n, max(1, math.ceil(fraction * n - 1e-9)))


def select_candidates(request: RankingRequest, scores: Sequence[float], fraction: float) -> VerifierDecision:
    """Keep the top-scoring ``ceil(fraction * n)`` candidates of ``request``."""
    if not (0.0 < fraction <= 1.0):
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    candidates = np.asarray(request.candidates, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != candidates.shape:
        raise ValidationError(f"{scores.shape[0] if scores.ndim else 0} scores for {candidates.shape[0]} candidates")
    if np.any(np.isnan(scores)):
        raise ValidationError("scores contain NaN")
    order = candidates[np.lexsort((candidates, -scores))]
    keep = selected_count(fraction, candidates.shape[0])
    return VerifierDecision(
        request_id=request.request_id,
        selected=tuple(order[:keep].tolist()),
        rejected=tuple(order[keep:].tolist()),
        fraction_used=fraction,
    )


def verifier_score(
    model: VerticalModel,
    user_id: int,
    item_id: int,
    layout: FeatureLayout,
    world: Optional[World] = None,
    enriched: Optional[EnrichedFeature] = None,
) -> float:
    """The vertical model's probability for one pair from the features at hand.

    Without ``enriched`` the embedding slots are zero placeholders.
    """
    if world is not None:
        world.check_user(user_id)
        world.check_item(item_id)
    if enriched is None:
        enriched = EnrichedFeature.absent(layout.d_emb)
    return predict(model, assemble_features(enriched, user_id, item_id, layout))


class Verifier:
    """Per-request selection with an optional decision audit sink."""

    def __init__(self, fraction: float = 0.2, evict_on_reject: bool = False, sink: Any = None):
        if not (0.0 < fraction <= 1.0):
            raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
        self.fraction = fraction
        self.evict_on_reject = evict_on_reject
        self.sink = sink

    def decide(self, request: RankingRequest, scores: Sequence[float]) -> VerifierDecision:
        decision = select_candidates(request, scores, self.fraction)
        if self.sink is not None:
            self.sink.write(decision.to_dict())
        return decision
