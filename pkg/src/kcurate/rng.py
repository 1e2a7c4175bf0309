"""Seeding convention: counter-based streams keyed by integer tuples.

Every stochastic choice in the package draws from its own Philox stream
keyed by (seed, context...) so results are independent of execution order
and stable across platforms.
"""

from __future__ import annotations

import numpy as np


def philox(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed=np.random.SeedSequence(list(key))))
