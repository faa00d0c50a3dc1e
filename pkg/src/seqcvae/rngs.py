"""Named random sub-streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def substream(seed: int, name: str, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, name, *keys)``; stable across runs."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, _key(name), *(_key(k) for k in keys)])


def subseed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**31 - 1))
