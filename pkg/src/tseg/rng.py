"""Named random sub-streams derived from one integer seed.

``stream(seed, "shuffle")`` is independent of ``stream(seed, "init")`` and
both are reproducible on their own, so e.g. the shuffle order does not
change when the network gains parameters.
"""

import zlib

import numpy as np


def stream(seed, name, *extra):
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
