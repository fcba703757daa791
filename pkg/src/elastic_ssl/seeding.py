"""Deterministic RNG streams.

Every stochastic element draws from a numpy Generator keyed by (root seed,
stream id, optional step index).  Randomness is therefore a pure function of
the seed and the iteration, which makes resumed runs bit-compatible with
uninterrupted ones without serializing generator state.
"""

from __future__ import annotations

import numpy as np

STREAM_INIT = 0      # parameter initialization
STREAM_QUEUE = 1     # negative-key queue warm start
STREAM_BATCH = 2     # per-epoch shuffling
STREAM_AUG = 3       # per-iteration view augmentation
STREAM_ARCH = 4      # per-iteration subnet sampling
STREAM_DATA = 5      # synthetic dataset rendering
STREAM_SEARCH = 6    # candidate sampling during search
STREAM_RANK = 7      # subnet sampling for ranking experiments


def stream_rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    """Independent generator for (seed, stream, *extra)."""
    return np.random.default_rng([int(seed), int(stream), *[int(e) for e in extra]])
