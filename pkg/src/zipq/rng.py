"""Seedable counter-based random streams.

Every stochastic operation in this package takes an explicit numpy
``Generator`` so runs can be replayed bit-for-bit.  We standardize on the
Philox bit generator (counter-based, cheap to split).
"""

import numpy as np


def new_rng(seed) -> np.random.Generator:
    """Create a fresh Philox-backed generator for the given seed."""
    return np.random.Generator(np.random.Philox(seed))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child streams from ``rng``."""
    return rng.spawn(n)
