"""Keyed random streams.

Every random draw in the package comes from a generator derived from the
global seed plus a tuple of keys (image id, region index, step, ...), so
results never depend on call order or scheduling.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"negative rng key: {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def lane_rng(seed: int, *keys) -> np.random.Generator:
    """Generator seeded from ``(seed, *keys)``; identical keys give identical streams."""
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
