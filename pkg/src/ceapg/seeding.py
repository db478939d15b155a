"""Counter-based seed derivation.

Every random stream is ``SeedSequence(root, spawn_key=path)`` for an integer
path such as ``(seed_index, generation, candidate)``.  Streams depend only on
their path, never on scheduling order, so parallel and sequential runs draw
identical numbers.
"""
from __future__ import annotations

import numpy as np

# top-level stream tags inside one training run
INIT = 0
SAMPLE = 1
CANDIDATE = 2


def derive(root: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in path)))


def root_from(rng: np.random.Generator) -> int:
    """Draw a 63-bit root seed from a caller-supplied generator."""
    return int(rng.integers(0, 2**63 - 1))
