"""Deterministic hashing and counter-based random draws.

Every random decision in the pipeline that must reproduce bit-for-bit
across runs and machines goes through these helpers. Python's salted
``hash()`` and global RNG state are never used for artifact content.

Two primitives:

* ``stable_u64`` — blake2b digest of structured parts; used wherever the
  key material is strings (concepts, n-grams, captions).
* ``counter_uniform`` — a splitmix64-style counter generator keyed by
  ``(seed, id)``; used for per-item Bernoulli draws because it is
  insertion-order independent and vectorizes over numpy uint64 arrays.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0**-53)


def stable_u64(*parts: object) -> int:
    """64-bit digest of the parts, stable across processes and platforms.

    Each part is length-prefixed before hashing so that adjacent parts
    cannot alias (("ab", "c") never collides with ("a", "bc")).
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, bytes):
            data = part
        elif isinstance(part, str):
            data = part.encode("utf-8")
        elif isinstance(part, (int, np.integer)):
            data = int(part).to_bytes(16, "little", signed=True)
        else:
            raise TypeError(f"unsupported part type {type(part)!r}")
        h.update(len(data).to_bytes(4, "little"))
        h.update(data)
    return int.from_bytes(h.digest(), "little")


def stable_digest(nbytes: int, *parts: object) -> bytes:
    """Like stable_u64 but returns an arbitrary-width digest."""
    h = hashlib.blake2b(digest_size=nbytes)
    for part in parts:
        if isinstance(part, bytes):
            data = part
        elif isinstance(part, str):
            data = part.encode("utf-8")
        elif isinstance(part, (int, np.integer)):
            data = int(part).to_bytes(16, "little", signed=True)
        else:
            raise TypeError(f"unsupported part type {type(part)!r}")
        h.update(len(data).to_bytes(4, "little"))
        h.update(data)
    return h.digest()


def derive_seed(*parts: object) -> int:
    """Derive a sub-seed (63-bit non-negative) from structured parts."""
    return stable_u64(*parts) & 0x7FFFFFFFFFFFFFFF


def _finalize(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _SM_M1
    x = x ^ (x >> np.uint64(27))
    x = x * _SM_M2
    x = x ^ (x >> np.uint64(31))
    return x


def counter_uniform(seed: int, ids: np.ndarray) -> np.ndarray:
    """Uniform floats in [0, 1) keyed by (seed, id), order independent.

    Evaluates the splitmix64 output function at counter position ``id``
    of the stream whose start state is a digest of ``seed``. Permuting
    ``ids`` permutes the outputs identically.
    """
    start = np.uint64(stable_u64("counter-stream", seed))
    counters = np.asarray(ids, dtype=np.uint64)
    state = start + (counters + np.uint64(1)) * _SM_GAMMA
    out = _finalize(state)
    return (out >> np.uint64(11)).astype(np.float64) * _INV_2_53


def unit_uniform(seed: int, item_id: int) -> float:
    """Scalar convenience wrapper over counter_uniform."""
    return float(counter_uniform(seed, np.array([item_id], dtype=np.uint64))[0])
