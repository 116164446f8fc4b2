"""Seedable counter-based random streams.

Every stochastic routine in the package takes an explicit 64-bit master seed
and derives independent child streams through a fixed, documented rule:

    child = Philox(SeedSequence(entropy=master_seed, spawn_key=stream))

``stream`` is a tuple of small non-negative integers (domain tag, grid index,
trial index, ...).  ``SeedSequence`` is numpy's avalanche hash mix, so the rule
is exactly ``child_seed = hash(master_seed, stream)``; Philox is counter-based
and its bit stream is guaranteed stable across platforms and numpy releases.
Distinct streams never overlap, which makes trial-level parallelism replayable.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep streams for unrelated purposes disjoint even when the
# remaining indices collide.
STREAM_SAMPLE = 0
STREAM_TEST = 1
STREAM_RESAMPLE = 2
STREAM_MC = 3
STREAM_SUBSAMPLE = 4


def spawn_generator(master_seed: int, *stream: int) -> np.random.Generator:
    """Derive the child generator for ``stream`` from ``master_seed``."""
    if master_seed < 0:
        raise ValueError("master_seed must be a non-negative integer")
    if any(s < 0 for s in stream):
        raise ValueError("stream indices must be non-negative")
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(stream))
    return np.random.Generator(np.random.Philox(seq))
