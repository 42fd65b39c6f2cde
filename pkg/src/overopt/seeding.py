"""Named random streams: (seed, key, key, ...) -> independent numpy Generator."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *keys) -> np.random.Generator:
    """A generator that depends only on ``seed`` and the ordered ``keys``.

    Adding a new consumer with a new key never shifts an existing consumer's draws.
    """
    entropy = [int(seed)] + [zlib.crc32(str(k).encode()) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
