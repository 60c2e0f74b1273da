"""Named random streams split from one 64-bit master seed."""

from __future__ import annotations

import numpy as np

STREAM_IDS = {"data": 1, "init": 2, "perturb": 3, "eval": 4}


def stream(master_seed: int, name: str) -> np.random.Generator:
    seq = np.random.SeedSequence([int(master_seed) & (2**64 - 1), STREAM_IDS[name]])
    return np.random.default_rng(seq)


def streams_for(master_seed: int) -> dict[str, np.random.Generator]:
    return {name: stream(master_seed, name) for name in STREAM_IDS}
