"""
Counter-based random streams.

Every replicate (or Monte Carlo job) draws from its own Philox stream keyed
by (master seed, index), so results do not depend on how work is split
across workers.
"""

import numpy as np


def replicate_stream(seed: int, index: int, *extra: int) -> np.random.Generator:
    """
    Return the generator for replicate ``index`` under master ``seed``.

    Additional integers namespace independent job families (for example the
    two windows of a window-sensitivity diagnostic).
    """
    if seed < 0 or index < 0 or any(e < 0 for e in extra):
        raise ValueError("seed and stream indices must be non-negative")
    entropy = np.random.SeedSequence([seed, index, *extra])
    return np.random.Generator(np.random.Philox(entropy))


def job_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` for a derived family of streams."""
    return int(rng.integers(0, 2**63 - 1))
