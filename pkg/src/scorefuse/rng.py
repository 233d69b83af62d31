"""Counter-based random streams.

Every stream is a Philox generator keyed by an integer seed, so the draws of
one ensemble member depend only on its own seed and never on scheduling.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(key=int(seed) % (1 << 128)))


def member_seed(base_seed: int, index: int) -> int:
    return int(base_seed) + int(index)
