"""Hashing helpers

Salted id bucketing for the base features, counter-based uniforms for the
label generator and a stable digest of configuration payloads. Everything
here is a pure function of its arguments, so results are identical across
processes and platforms.
"""

import hashlib
import json
import struct
from functools import lru_cache
from typing import Any, Dict, Tuple

_TWO_64 = float(2 ** 64)


@lru_cache(maxsize=1_000_000)
def bucket(value: int, salt: str, n_buckets: int) -> int:
    """Map an integer id to one of ``n_buckets`` buckets under ``salt``."""
    digest = hashlib.blake2b(
        struct.pack("<q", int(value)), digest_size=8, key=salt.encode("utf-8")
    ).digest()
    return int.from_bytes(digest, "little") % n_buckets


def pair_uniforms(seed: int, user_id: int, item_id: int, clock: float) -> Tuple[float, float]:
    """Two independent uniforms in the open interval (0, 1) keyed by the arguments."""
    digest = hashlib.blake2b(
        struct.pack("<qqqd", int(seed), int(user_id), int(item_id), float(clock)),
        digest_size=16,
    ).digest()
    first, second = struct.unpack("<QQ", digest)
    return (first + 0.5) / _TWO_64, (second + 0.5) / _TWO_64


def pair_uniform(seed: int, user_id: int, item_id: int) -> float:
    """A uniform in (0, 1) keyed by the pair alone, constant over time."""
    digest = hashlib.blake2b(
        struct.pack("<qqq", int(seed), int(user_id), int(item_id)), digest_size=8, person=b"pair-noise"
    ).digest()
    return (int.from_bytes(digest, "little") + 0.5) / _TWO_64


def canonical_json(payload: Dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_digest(payload: Dict[str, Any]) -> str:
    """SHA-256 hex digest of the canonical JSON form of ``payload``."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()
