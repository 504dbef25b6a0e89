"""Synthetic World

Seedable latent-factor population of users and items, the ground-truth
label generator and the ranking-request stream with per-user temporal
locality. Stands in for production traffic.
"""

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit, ndtri

from .errors import UnknownIdError, ValidationError
from .tools.hashing import pair_uniform, pair_uniforms
from .tools.jsonl import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600.0
_DRIFT_BLOCK_HOURS = 64


class WorldConfig(BaseModel):
    """Parameters of the synthetic world and its request stream."""

    model_config = ConfigDict(extra="forbid")

    n_users: int = Field(200, ge=1)
    n_items: int = Field(160_000, ge=1)
    d_lat: int = Field(16, ge=1)
    candidates_per_request: int = Field(200, ge=1)
    revisit_probability: float = Field(0.6, ge=0.0, le=1.0)
    revisit_window_hours: float = Field(6.0, gt=0.0)
    mean_interarrival_seconds: float = Field(10.0, gt=0.0)
    drift_rate: float = Field(0.02, ge=0.0)
    label_noise: float = Field(0.5, ge=0.0)
    ordering_noise: float = Field(16.0, ge=0.0)
    popularity_sigma: float = Field(0.5, ge=0.0)
    activity_sigma: float = Field(0.0, ge=0.0)
    seed: int = Field(0, ge=0)


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    latent: np.ndarray
    drift_rate: float
    activity_weight: float = 1.0


@dataclass(frozen=True)
class ItemProfile:
    item_id: int
    latent: np.ndarray
    popularity_weight: float


@dataclass(frozen=True, eq=False)
class RankingRequest:
    """One timestamped ranking request: the early-stage candidate list for a user.

    ``candidates`` is a read-only int64 array in requester-visible order.
    """

    request_id: int
    user_id: int
    timestamp: float
    candidates: np.ndarray

    def __post_init__(self):
        candidates = np.asarray(self.candidates, dtype=np.int64)
        if candidates.ndim != 1:
            raise ValidationError("candidates must be a flat list of item ids")
        if np.unique(candidates).size != candidates.size:
            raise ValidationError(f"request {self.request_id} has duplicate candidates")
        candidates.flags.writeable = False
        object.__setattr__(self, "candidates", candidates)

    def to_dict(self) -> Dict:
        return {
            "request_id": int(self.request_id),
            "user_id": int(self.user_id),
            "timestamp": float(self.timestamp),
            "candidates": self.candidates.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RankingRequest":
        return cls(
            request_id=int(data["request_id"]),
            user_id=int(data["user_id"]),
            timestamp=float(data["timestamp"]),
            candidates=np.asarray(data["candidates"], dtype=np.int64),
        )


def _lognormal_weights(rng: np.random.Generator, sigma: float, size: int) -> np.ndarray:
    if sigma == 0:
        return np.ones(size)
    return rng.lognormal(mean=-0.5 * sigma * sigma, sigma=sigma, size=size)


class World:
    """Users, items and the ground-truth label model.

    User latents drift as a per-user random walk with one Gaussian step per
    simulated hour (scaled by ``drift_rate``), linearly interpolated inside
    the hour. Items are static.
    """

    def __init__(
        self,
        config: WorldConfig,
        user_latents: np.ndarray,
        item_latents: np.ndarray,
        popularity: np.ndarray,
        activity: Optional[np.ndarray] = None,
    ):
        user_latents = np.asarray(user_latents, dtype=np.float64)
        item_latents = np.asarray(item_latents, dtype=np.float64)
        popularity = np.asarray(popularity, dtype=np.float64)
        if user_latents.shape != (config.n_users, config.d_lat):
            raise ValidationError(
                f"user latents have shape {user_latents.shape}, expected {(config.n_users, config.d_lat)}"
            )
        if item_latents.shape != (config.n_items, config.d_lat):
            raise ValidationError(
                f"item latents have shape {item_latents.shape}, expected {(config.n_items, config.d_lat)}"
            )
        if popularity.shape != (config.n_items,) or np.any(popularity <= 0):
            raise ValidationError("popularity weights must be positive, one per item")
        if activity is None:
            activity = np.ones(config.n_users)
        activity = np.asarray(activity, dtype=np.float64)
        if activity.shape != (config.n_users,) or np.any(activity <= 0):
            raise ValidationError("activity weights must be positive, one per user")

        self.config = config
        self.user_latents = user_latents
        self.item_latents = item_latents
        self.popularity = popularity
        self.activity = activity
        for array in (self.user_latents, self.item_latents, self.popularity, self.activity):
            array.flags.writeable = False
        self._drift_knots: Dict[int, np.ndarray] = {}
        self._default_stream: Optional["RequestGenerator"] = None

    @property
    def n_users(self) -> int:
        return self.config.n_users

    @property
    def n_items(self) -> int:
        return self.config.n_items

    @property
    def d_lat(self) -> int:
        return self.config.d_lat

    @property
    def seed(self) -> int:
        return self.config.seed

    def check_user(self, user_id: int) -> int:
        if not 0 <= int(user_id) < self.n_users:
            raise UnknownIdError("user", int(user_id))
        return int(user_id)

    def check_item(self, item_id: int) -> int:
        if not 0 <= int(item_id) < self.n_items:
            raise UnknownIdError("item", int(item_id))
        return int(item_id)

    def check_items(self, item_ids: np.ndarray) -> np.ndarray:
        item_ids = np.asarray(item_ids, dtype=np.int64)
        bad = (item_ids < 0) | (item_ids >= self.n_items)
        if np.any(bad):
            raise UnknownIdError("item", int(item_ids[bad][0]))
        return item_ids

    def user(self, user_id: int) -> UserProfile:
        user_id = self.check_user(user_id)
        return UserProfile(
            user_id=user_id,
            latent=self.user_latents[user_id],
            drift_rate=self.config.drift_rate,
            activity_weight=float(self.activity[user_id]),
        )

    def item(self, item_id: int) -> ItemProfile:
        item_id = self.check_item(item_id)
        return ItemProfile(
            item_id=item_id,
            latent=self.item_latents[item_id],
            popularity_weight=float(self.popularity[item_id]),
        )

    @property
    def users(self) -> List[UserProfile]:
        return [self.user(user_id) for user_id in range(self.n_users)]

    def _walk(self, user_id: int, hours_needed: int) -> np.ndarray:
        knots = self._drift_knots.get(user_id)
        if knots is None:
            knots = np.zeros((1, self.d_lat))
        while knots.shape[0] <= hours_needed:
            block = (knots.shape[0] - 1) // _DRIFT_BLOCK_HOURS
            steps = np.random.default_rng([self.seed, 2, user_id, block]).standard_normal(
                (_DRIFT_BLOCK_HOURS, self.d_lat)
            )
            knots = np.vstack([knots, knots[-1] + np.cumsum(steps, axis=0)])
        self._drift_knots[user_id] = knots
        return knots

    def user_latent_at(self, user_id: int, clock: float) -> np.ndarray:
        """User latent after the drift accumulated up to ``clock``."""
        user_id = self.check_user(user_id)
        base = self.user_latents[user_id]
        if self.config.drift_rate == 0:
            return base
        hours = max(float(clock), 0.0) / SECONDS_PER_HOUR
        lower = int(np.floor(hours))
        knots = self._walk(user_id, lower + 1)
        frac = hours - lower
        walk = knots[lower] + frac * (knots[lower + 1] - knots[lower])
        return base + self.config.drift_rate * walk

    def affinity(self, user_id: int, item_ids: np.ndarray, clock: float) -> np.ndarray:
        item_ids = self.check_items(item_ids)
        return self.item_latents[item_ids] @ self.user_latent_at(user_id, clock)

    def label_probability(self, user_id: int, item_id: int, clock: float) -> float:
        """Click probability including the pair's deterministic logit noise."""
        item_id = self.check_item(item_id)
        logit = float(self.item_latents[item_id] @ self.user_latent_at(user_id, clock))
        if self.config.label_noise > 0:
            noise_u = pair_uniform(self.seed, user_id, item_id)
            logit += self.config.label_noise * float(ndtri(noise_u))
        return float(expit(logit))

    def true_label(self, user_id: int, item_id: int, clock: float) -> int:
        draw, _ = pair_uniforms(self.seed, user_id, item_id, clock)
        return int(draw < self.label_probability(user_id, item_id, clock))

    def true_labels(self, user_id: int, item_ids: Iterable[int], clock: float) -> np.ndarray:
        return np.array([self.true_label(user_id, int(i), clock) for i in item_ids], dtype=np.int8)

    def request_stream(self) -> "RequestGenerator":
        """A fresh request generator; every call replays the same stream."""
        return RequestGenerator(self)

    def next_request(self, clock: Optional[float] = None) -> RankingRequest:
        if self._default_stream is None:
            self._default_stream = self.request_stream()
        return self._default_stream.next_request(clock)

    @classmethod
    def from_arrays(
        cls,
        user_latents: np.ndarray,
        item_latents: np.ndarray,
        popularity: Optional[np.ndarray] = None,
        **overrides,
    ) -> "World":
        """Build a world around explicit latents (handy for hand-built scenarios)."""
        user_latents = np.atleast_2d(np.asarray(user_latents, dtype=np.float64))
        item_latents = np.atleast_2d(np.asarray(item_latents, dtype=np.float64))
        config = WorldConfig(
            n_users=user_latents.shape[0],
            n_items=item_latents.shape[0],
            d_lat=user_latents.shape[1],
            candidates_per_request=min(overrides.pop("candidates_per_request", 1), item_latents.shape[0]),
            **overrides,
        )
        if popularity is None:
            popularity = np.ones(config.n_items)
        return cls(config, user_latents, item_latents, popularity)


def generate_world(config: Union[WorldConfig, Dict]) -> World:
    """Draw a world from ``config``. Equal configs give bit-identical worlds."""
    if not isinstance(config, WorldConfig):
        config = WorldConfig.model_validate(config)
    rng = np.random.default_rng([config.seed, 0])
    user_latents = rng.standard_normal((config.n_users, config.d_lat))
    item_latents = rng.standard_normal((config.n_items, config.d_lat))
    popularity = _lognormal_weights(rng, config.popularity_sigma, config.n_items)
    activity = _lognormal_weights(rng, config.activity_sigma, config.n_users)
    logger.debug(
        f"Generated world seed={config.seed} users={config.n_users} items={config.n_items}"
    )
    return World(config, user_latents, item_latents, popularity, activity)


class RequestGenerator:
    """Stateful request stream over a world.

    Each candidate slot is a revisit of the user's recent candidate union
    with probability ``revisit_probability``, otherwise a fresh
    popularity-weighted draw. Candidates are then ordered by true affinity
    plus Gaussian ordering noise, ties by ascending item id.
    """

    def __init__(self, world: World):
        config = world.config
        if config.candidates_per_request > config.n_items:
            raise ValidationError(
                f"candidates_per_request={config.candidates_per_request} exceeds n_items={config.n_items}"
            )
        self.world = world
        self._rng = np.random.default_rng([config.seed, 3])
        self._window = config.revisit_window_hours * SECONDS_PER_HOUR
        self._popularity_cdf = np.cumsum(world.popularity) / world.popularity.sum()
        self._activity_cdf = np.cumsum(world.activity) / world.activity.sum()
        self._uniform_users = config.activity_sigma == 0
        self._history: Dict[int, Deque[Tuple[float, np.ndarray]]] = {}
        self._clock = 0.0
        self._next_id = 0

    @property
    def clock(self) -> float:
        return self._clock

    def __iter__(self) -> Iterator[RankingRequest]:
        while True:
            yield self.next_request()

    def take(self, n: int) -> List[RankingRequest]:
        return [self.next_request() for _ in range(n)]

    def _sample_user(self) -> int:
        if self._uniform_users:
            return int(self._rng.integers(self.world.n_users))
        index = int(np.searchsorted(self._activity_cdf, self._rng.random(), side="right"))
        return min(index, self.world.n_users - 1)

    def _recent_union(self, user_id: int, now: float) -> np.ndarray:
        history = self._history.get(user_id)
        if not history:
            return np.empty(0, dtype=np.int64)
        while history and now - history[0][0] > self._window:
            history.popleft()
        if not history:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate([candidates for _, candidates in history]))

    def _draw_fresh(self, need: int, exclude: np.ndarray) -> np.ndarray:
        n_items = self.world.n_items
        picked = np.empty(0, dtype=np.int64)
        for _ in range(8):
            draws = np.searchsorted(self._popularity_cdf, self._rng.random(2 * need + 16), side="right")
            draws = np.minimum(draws, n_items - 1).astype(np.int64)
            _, first = np.unique(draws, return_index=True)
            draws = draws[np.sort(first)]
            draws = draws[~np.isin(draws, exclude) & ~np.isin(draws, picked)]
            picked = np.concatenate([picked, draws[: need - picked.size]])
            if picked.size == need:
                return picked
        # Small catalogues: finish without replacement over what is left.
        remaining = np.setdiff1d(np.arange(n_items), np.concatenate([exclude, picked]))
        weights = self.world.popularity[remaining]
        extra = self._rng.choice(remaining, size=need - picked.size, replace=False, p=weights / weights.sum())
        return np.concatenate([picked, extra.astype(np.int64)])

    def next_request(self, clock: Optional[float] = None) -> RankingRequest:
        """Emit the next request, at ``clock`` if given, else after an exponential gap."""
        config = self.world.config
        if clock is None:
            now = self._clock + float(self._rng.exponential(config.mean_interarrival_seconds))
        else:
            now = float(clock)
            if now < self._clock:
                raise ValidationError(f"clock {now} precedes previous request at {self._clock}")

        user_id = self._sample_user()
        union = self._recent_union(user_id, now)
        n = config.candidates_per_request
        n_revisit = 0
        if union.size:
            n_revisit = min(int(self._rng.binomial(n, config.revisit_probability)), union.size)
        revisit = (
            self._rng.choice(union, size=n_revisit, replace=False)
            if n_revisit
            else np.empty(0, dtype=np.int64)
        )
        fresh = self._draw_fresh(n - n_revisit, revisit) if n > n_revisit else np.empty(0, dtype=np.int64)
        candidates = np.concatenate([revisit, fresh]).astype(np.int64)

        score = self.world.item_latents[candidates] @ self.world.user_latent_at(user_id, now)
        if config.ordering_noise > 0:
            score = score + config.ordering_noise * self._rng.standard_normal(candidates.size)
        candidates = candidates[np.lexsort((candidates, -score))]

        self._history.setdefault(user_id, deque()).append((now, candidates))
        request = RankingRequest(
            request_id=self._next_id, user_id=user_id, timestamp=now, candidates=candidates
        )
        self._next_id += 1
        self._clock = now
        return request


def next_request(world: World, clock: Optional[float] = None) -> RankingRequest:
    """Next request from the world's default stream."""
    return world.next_request(clock)


def true_label(world: World, user_id: int, item_id: int, clock: float) -> int:
    return world.true_label(user_id, item_id, clock)


def measure_locality(requests: Iterable[RankingRequest], window_hours: float = 6.0) -> float:
    """Per-request mean fraction of candidates seen by the same user within the window.

    Requests whose user has no history inside the window count as 0.
    """
    if window_hours <= 0:
        raise ValidationError("window_hours must be positive")
    window = window_hours * SECONDS_PER_HOUR
    history: Dict[int, Deque[Tuple[float, np.ndarray]]] = {}
    total = 0.0
    count = 0
    for request in requests:
        past = history.setdefault(request.user_id, deque())
        while past and request.timestamp - past[0][0] > window:
            past.popleft()
        if past:
            union = np.unique(np.concatenate([candidates for _, candidates in past]))
            total += float(np.isin(request.candidates, union).mean())
        past.append((request.timestamp, request.candidates))
        count += 1
    if count == 0:
        raise ValidationError("no requests to measure")
    return total / count


def export_requests(path: Union[str, Path], requests: Iterable[RankingRequest]) -> int:
    """Write requests as JSON lines ``{request_id, user_id, timestamp, candidates}``."""
    return write_jsonl(path, (request.to_dict() for request in requests))


def import_requests(path: Union[str, Path]) -> List[RankingRequest]:
    requests = [RankingRequest.from_dict(record) for record in read_jsonl(path)]
    for previous, current in zip(requests, requests[1:]):
        if current.timestamp < previous.timestamp:
            raise ValidationError(
                f"trace {path} goes back in time at request {current.request_id}"
            )
    logger.info(f"Imported {len(requests)} requests from {path}")
    return requests
