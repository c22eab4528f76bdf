"""Deterministic RNG derivation from structured keys.

Every stochastic component draws from a generator derived here, so reruns
with the same seed are byte-identical and independent streams never collide
(episode generation, per-sample noise, batch shuffling, ...).
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    if isinstance(key, str):
        return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    raise TypeError(f"unsupported rng key {key!r}")


def rng_from(*keys) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of ints/strings (platform stable)."""
    entropy = [_key_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
