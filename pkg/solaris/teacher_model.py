"""Teacher Model

Deterministic stand-in for the foundation model: raw user-item interaction
vectors from the world latents, a fixed compression map down to the
embedding dimension, per-user embeddings for the neighbour table and the
simulated per-embedding compute cost charged to background workers.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Tuple, Union

import numpy as np

from .errors import ValidationError
from .synthetic_world import UserProfile, World

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TeacherEmbedding:
    """Compressed interaction vector plus the logical time it was computed."""

    vector: np.ndarray
    computed_at: float

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float64)
        if vector.ndim != 1:
            raise ValidationError("embedding must be a flat vector")
        if not np.all(np.isfinite(vector)):
            raise ValidationError("embedding has non-finite components")
        object.__setattr__(self, "vector", vector)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


class CompressionMap:
    """Fixed linear projection from raw interaction space to ``d_emb``.

    Raw vectors are laid out ``[user * item | user | item]`` so the matrix
    has ``3 * d_lat`` rows. The projection is immutable once built.
    """

    def __init__(self, projection: np.ndarray):
        projection = np.array(projection, dtype=np.float64)
        if projection.ndim != 2:
            raise ValidationError("projection must be a matrix")
        d_raw, d_emb = projection.shape
        if d_emb > d_raw or np.linalg.matrix_rank(projection) < d_emb:
            raise ValidationError(f"projection {projection.shape} does not have full column rank")
        if d_raw % 3 != 0:
            raise ValidationError(f"raw dimension {d_raw} is not three latent blocks")
        projection.flags.writeable = False
        self.projection = projection

    @property
    def d_raw(self) -> int:
        return self.projection.shape[0]

    @property
    def d_emb(self) -> int:
        return self.projection.shape[1]

    @property
    def d_lat(self) -> int:
        return self.d_raw // 3

    @property
    def user_block(self) -> np.ndarray:
        return self.projection[self.d_lat : 2 * self.d_lat]

    @classmethod
    def from_seed(cls, seed: int, d_lat: int, d_emb: int) -> "CompressionMap":
        """Gaussian projection scaled by ``1/sqrt(d_raw)``, redrawn until full rank."""
        d_raw = 3 * d_lat
        if d_emb > d_raw:
            raise ValidationError(f"d_emb={d_emb} exceeds raw dimension {d_raw}")
        rng = np.random.default_rng([seed, 1])
        while True:
            projection = rng.standard_normal((d_raw, d_emb)) / np.sqrt(d_raw)
            if np.linalg.matrix_rank(projection) == d_emb:
                return cls(projection)

    def project(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != self.d_raw:
            raise ValidationError(f"raw vector has {raw.shape[-1]} components, map expects {self.d_raw}")
        return raw @ self.projection

    def to_dict(self) -> dict:
        return {"d_raw": self.d_raw, "d_emb": self.d_emb, "projection": self.projection.tolist()}

    def save(self, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CompressionMap":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        projection = np.asarray(data["projection"], dtype=np.float64)
        if projection.shape != (data["d_raw"], data["d_emb"]):
            raise ValidationError(f"{path}: projection shape disagrees with its header")
        return cls(projection)


def raw_interaction(user_latent: np.ndarray, item_latent: np.ndarray) -> np.ndarray:
    """``[u * v | u | v]``; accepts single vectors or row-aligned matrices."""
    user_latent = np.asarray(user_latent, dtype=np.float64)
    item_latent = np.asarray(item_latent, dtype=np.float64)
    if user_latent.shape != item_latent.shape:
        raise ValidationError(
            f"latent dimension mismatch: user {user_latent.shape} vs item {item_latent.shape}"
        )
    return np.concatenate([user_latent * item_latent, user_latent, item_latent], axis=-1)


def compute_user_embedding(compression_map: CompressionMap, user: Any) -> np.ndarray:
    """Project a user latent (or ``UserProfile``) through the map's user block."""
    latent = user.latent if isinstance(user, UserProfile) else np.asarray(user, dtype=np.float64)
    if latent.shape[-1] != compression_map.d_lat:
        raise ValidationError(f"user latent has {latent.shape[-1]} components, map expects {compression_map.d_lat}")
    return latent @ compression_map.user_block


def simulate_compute_latency(config: Any, n_embeddings: int = 1) -> float:
    """Simulated worker seconds to compute ``n_embeddings`` teacher embeddings."""
    return n_embeddings * config.per_embedding_cost_ms / 1000.0


class TeacherModel:
    """Teacher bound to one world.

    Embeddings depend only on the world seed and the pair; the clock passed
    in is recorded as ``computed_at`` and nothing else.
    """

    def __init__(self, world: World, compression_map: CompressionMap):
        if compression_map.d_lat != world.d_lat:
            raise ValidationError(
                f"compression map is for d_lat={compression_map.d_lat}, world has d_lat={world.d_lat}"
            )
        self.world = world
        self.compression_map = compression_map

    @property
    def d_emb(self) -> int:
        return self.compression_map.d_emb

    def interaction_embedding(self, user_id: int, item_id: int, clock: float) -> TeacherEmbedding:
        user_id = self.world.check_user(user_id)
        item_id = self.world.check_item(item_id)
        raw = raw_interaction(self.world.user_latents[user_id], self.world.item_latents[item_id])
        return TeacherEmbedding(vector=self.compression_map.project(raw), computed_at=float(clock))

    def interaction_embeddings(self, user_ids: np.ndarray, item_ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Batch variant. Returns ``(vectors, valid)``; rows with unknown ids are zero and invalid."""
        user_ids = np.asarray(user_ids, dtype=np.int64)
        item_ids = np.asarray(item_ids, dtype=np.int64)
        valid = (
            (user_ids >= 0) & (user_ids < self.world.n_users)
            & (item_ids >= 0) & (item_ids < self.world.n_items)
        )
        vectors = np.zeros((user_ids.shape[0], self.d_emb))
        if np.any(valid):
            raw = raw_interaction(
                self.world.user_latents[user_ids[valid]], self.world.item_latents[item_ids[valid]]
            )
            vectors[valid] = self.compression_map.project(raw)
        return vectors, valid

    def user_embedding(self, user_id: int) -> np.ndarray:
        user_id = self.world.check_user(user_id)
        return compute_user_embedding(self.compression_map, self.world.user_latents[user_id])

    def user_embeddings(self) -> np.ndarray:
        return compute_user_embedding(self.compression_map, self.world.user_latents)


def compute_interaction_embedding(
    compression_map: CompressionMap, world: World, user_id: int, item_id: int, clock: float
) -> TeacherEmbedding:
    """Teacher embedding of one pair, stamped with ``clock``."""
    return TeacherModel(world, compression_map).interaction_embedding(user_id, item_id, clock)


def create_default_teacher(world: World, d_emb: int = 8) -> TeacherModel:
    """Teacher with the projection drawn from the world seed."""
    compression_map = CompressionMap.from_seed(world.seed, world.d_lat, d_emb)
    logger.debug(f"Built compression map {compression_map.d_raw}x{compression_map.d_emb}")
    return TeacherModel(world, compression_map)


__all__ = [
    "CompressionMap",
    "TeacherEmbedding",
    "TeacherModel",
    "compute_interaction_embedding",
    "compute_user_embedding",
    "create_default_teacher",
    "raw_interaction",
    "simulate_compute_latency",
]
