"""Reproducible random streams.

Every stream is a Philox generator keyed by a seed and a tuple of integer
identifiers (chain, system, replicate, ...), so results do not depend on the
order in which streams are created.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_rng", "stream"]


def make_rng(seed=None):
    """A Philox generator, or ``seed`` itself if it already is a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def stream(seed, *ids):
    """Independent generator for the stream labelled ``ids`` under ``seed``."""
    if any(int(i) < 0 for i in ids):
        raise ValueError("stream identifiers must be nonnegative")
    entropy = [int(seed)] + [int(i) for i in ids]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
