"""Seeded, platform-portable random streams.

Every stochastic routine takes a :class:`numpy.random.Generator` backed by the
counter-based Philox bit generator, so replicates are bit-reproducible.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(master: int, *keys: int) -> int:
    """Deterministic child seed for the stream identified by ``keys``."""
    ss = np.random.SeedSequence([int(master), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def child_rngs(master: int, n: int) -> list[np.random.Generator]:
    """``n`` independent streams, unit ``i`` seeded from ``(master, i)``."""
    return [make_rng(derive_seed(master, i)) for i in range(n)]
