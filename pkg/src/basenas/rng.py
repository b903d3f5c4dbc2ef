"""Named, counter-based random streams.

Every random draw in the package comes from ``stream(seed, *keys)``: a Philox
generator keyed by the root seed and a tuple of names/counters. A stream's
output depends only on its keys, never on how many other streams were used
before it, so serial and parallel runs see the same numbers.
"""
import zlib

import numpy as np


def _encode(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def stream(seed, *keys):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_encode(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
