"""Counter-based random streams keyed by (seed, purpose, counters)."""
import zlib

import numpy as np


def rng_for(seed: int, tag: str, *counters: int) -> np.random.Generator:
    """Philox generator whose stream depends only on its key, never on call order."""
    key = [int(seed), zlib.crc32(tag.encode()), *(int(c) for c in counters)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
