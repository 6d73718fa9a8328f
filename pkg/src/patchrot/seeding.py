"""Splittable deterministic random streams.

Every consumer derives an independent Philox substream from a 64-bit root
seed plus a small integer path (purpose, epoch, index).  Substreams never
share state, so per-image work can run in any order without changing
results.
"""

import numpy as np

# purpose tags for substream derivation
SHUFFLE = 1
PLACEMENT = 2
INIT = 3
GLYPH = 4
HEAD = 5

_MASK64 = (1 << 64) - 1


def substream(seed: int, purpose: int, epoch: int = 0, index: int = 0) -> np.random.Generator:
    """Generator keyed by (seed, purpose, epoch, index).

    Philox is counter-based, so distinct keys give independent, portable
    streams.  epoch and index must stay below 2**28.
    """
    if not 0 <= epoch < (1 << 28) or not 0 <= index < (1 << 28):
        raise ValueError("epoch/index out of the 28-bit substream range")
    low = ((purpose & 0xFF) << 56) | (epoch << 28) | index
    key = ((seed & _MASK64) << 64) | low
    return np.random.Generator(np.random.Philox(key=key))
