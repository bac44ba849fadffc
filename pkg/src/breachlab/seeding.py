"""Deterministic RNG derivation.

Every stochastic step in the lab draws from a Generator derived from an
integer seed plus a tuple of integer tags, so any sub-stream can be
reconstructed in isolation (replays, per-sample attack RNG, per-label
hidden sampling).
"""

from __future__ import annotations

import numpy as np

# Stream tags. Kept in one place so derived streams never collide.
TAG_HIDDEN_SAMPLES = 101
TAG_HIDDEN_ORDER = 102
TAG_ASSIGNMENT = 103
TAG_ATTACK = 104
TAG_TARGETS = 105
TAG_INPUT_PICK = 106
TAG_PRUNE = 107
TAG_TRIAL = 108
TAG_FINETUNE_DATA = 109


def child_seed(seed: int, *tags: int) -> int:
    """Stable 64-bit child seed for (seed, tags)."""
    ss = np.random.SeedSequence((int(seed),) + tuple(int(t) for t in tags))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def child_rng(seed: int, *tags: int) -> np.random.Generator:
    """Generator seeded by `child_seed(seed, *tags)`."""
    return np.random.default_rng(child_seed(seed, *tags))
