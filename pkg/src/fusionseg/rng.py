"""Named random streams derived from one run seed (data / init / dropout / ...)."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; same (seed, name, extra) -> same stream."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))] + [int(e) for e in extra]
    return np.random.default_rng(np.random.SeedSequence(key))
