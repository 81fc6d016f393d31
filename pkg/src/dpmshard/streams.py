"""Deterministic random streams keyed by (seed, purpose, iteration, shard).

Every consumer gets its own ``numpy.random.Generator`` built from a
``SeedSequence`` over the full key, so draws never depend on which worker
thread runs a task or on how many tasks ran before it.
"""
from __future__ import annotations

import numpy as np

INIT = 1
CALIBRATE = 2
SERIAL = 3
MAP = 4
REDUCE = 5
DATA = 6
GEWEKE = 7


def stream(seed: int, *key: int) -> np.random.Generator:
    if seed < 0 or any(k < 0 for k in key):
        raise ValueError("stream keys must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, key)])))


def sample_log_categorical(logp: np.ndarray, u: float) -> int:
    """Index drawn from unnormalized log weights using a uniform ``u`` in [0, 1)."""
    w = np.exp(logp - np.max(logp))
    c = np.cumsum(w)
    return min(int(np.searchsorted(c, u * c[-1], side="right")), len(c) - 1)
