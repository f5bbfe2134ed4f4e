"""Named, keyed RNG streams.

Every random draw in a run comes from ``stream(seed, purpose, *keys)``, which
seeds a fresh PCG64 generator with the entropy list
``[seed, PURPOSES[purpose], *keys]``.  Streams never share state, so the
order in which branches or clients are processed cannot change any draw.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "init": 1,
    "select": 2,
    "batch": 3,
    "replay": 4,
    "partition": 5,
    "blobs": 6,
    "holdout": 7,
    "noise": 8,
    "suite": 9,
}


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), PURPOSES[purpose], *(int(k) for k in keys)])
