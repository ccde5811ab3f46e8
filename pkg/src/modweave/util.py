"""Small shared helpers."""

from __future__ import annotations

import zlib

import numpy as np


def rng_from(seed: int, *tags) -> np.random.Generator:
    """Deterministic generator for (seed, purpose) streams.

    String tags hash through crc32 (stable across platforms and runs),
    integer tags pass through. Every stochastic draw in the package comes
    from one of these streams so reruns and checkpoint resumes replay
    identical randomness.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for t in tags:
        if isinstance(t, (int, np.integer)):
            entropy.append(int(t) & 0xFFFFFFFFFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(t).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def round_half_up(x: float) -> int:
    """round(x) with .5 always going up; mask arithmetic depends on it."""
    return int(np.floor(x + 0.5))
