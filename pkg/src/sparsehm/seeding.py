"""Deterministic seed derivation.

Every stochastic component of the pipeline draws from a counter-based
generator keyed by a sub-seed derived from the master run seed with
`mix64`.  Parallel execution order therefore cannot change any result:
the sub-seed of (stage, assimilation, member, stream) is a pure function
of those labels.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def mix64(*parts: int) -> int:
    """Combine integer labels into one well-mixed 64-bit sub-seed.

    splitmix64 finalizer applied over the parts; order-sensitive, so
    mix64(a, b) != mix64(b, a) in general.
    """
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = (h + (int(p) & _MASK64)) & _MASK64
        h ^= h >> 30
        h = (h * 0xBF58476D1CE4E5B9) & _MASK64
        h ^= h >> 27
        h = (h * 0x94D049BB133111EB) & _MASK64
        h ^= h >> 31
    return h


def stream(*parts: int) -> np.random.Generator:
    """A fresh, independent Generator keyed by the given labels."""
    return np.random.Generator(np.random.Philox(key=mix64(*parts)))
