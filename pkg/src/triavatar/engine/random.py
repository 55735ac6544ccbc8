"""Deterministic RNG streams.

Every stochastic stage derives its generator from integer key tuples, so
training trajectories replay bit-identically from a seed regardless of how
work is chunked.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def make_rng(*keys: int) -> np.random.Generator:
    """Generator for a (seed, step, stream...) key tuple."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))


def seeded_normal(shape, seed) -> Tensor:
    """Standard-normal tensor, bit-reproducible for a fixed (shape, seed)."""
    if isinstance(seed, (tuple, list)):
        rng = make_rng(*seed)
    else:
        rng = make_rng(int(seed))
    return Tensor(rng.standard_normal(tuple(shape)))
