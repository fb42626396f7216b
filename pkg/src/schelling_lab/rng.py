"""Seeded random streams.

Every stochastic routine draws from a ``numpy.random.Generator`` backed by
PCG64.  Independent streams are obtained by key-splitting a root
``SeedSequence``: the stream for ``(seed, purpose, replicate)`` is

    SeedSequence(entropy=seed, spawn_key=(PURPOSE_CODES[purpose], replicate))

so streams for different purposes or replicates never overlap, and adding a
new purpose never perturbs existing ones.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"

PURPOSE_CODES = {
    "init": 1,
    "clock": 2,
    "tiebreak": 3,
    "white_noise": 4,
    "lipschitz": 5,
    "erosion": 6,
    "generic": 99,
}


def stream(seed: int, purpose: str = "generic", replicate: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, purpose, replicate)``."""
    if purpose not in PURPOSE_CODES:
        raise ValueError(f"unknown stream purpose {purpose!r}")
    if seed < 0 or replicate < 0:
        raise ValueError("seed and replicate must be nonnegative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(PURPOSE_CODES[purpose], int(replicate)))
    return np.random.Generator(np.random.PCG64(ss))
