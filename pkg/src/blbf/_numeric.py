from __future__ import annotations

import math

import numpy as np


def exact_sum(values) -> float:
    """Correctly rounded sum; the result does not depend on element order."""
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist())


def exact_mean(values) -> float:
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("mean of an empty array")
    return math.fsum(values.tolist()) / values.size


def derive_seed(base: int, *keys: int) -> int:
    """Mix a base seed with integer keys into a new 63-bit seed."""
    ss = np.random.SeedSequence([int(base) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
