"""Seeded random substreams.

Every stochastic step draws from a generator keyed by (purpose, *ids) under
the experiment seed, so results never depend on call order or on how many
worker threads produced the client updates.
"""

from __future__ import annotations

import numpy as np

# purpose tags; append only, never renumber
PARTITION = 0
LOCAL_SHUFFLE = 1
DP_NOISE = 2
GENERATOR_INIT = 3
GENERATOR_LATENT = 4
MODEL_INIT = 5
DATASET = 6
ROOT_SAMPLE = 7
TEST_SPLIT = 8
SWEEP = 9


def substream(seed: int, purpose: int, *ids: int) -> np.random.Generator:
    key = (int(purpose),) + tuple(int(i) for i in ids)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def derive_seed(seed: int, *ids: int) -> int:
    """A 63-bit seed derived from ``seed`` and ``ids``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in ids))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1
