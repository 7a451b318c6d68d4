"""Deterministic seed splitting.

Every random stream is ``np.random.default_rng(mix64(seed, tag))`` so that
components can be reproduced independently of each other.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def mix64(seed: int, tag: str | int = 0) -> int:
    """``splitmix64(splitmix64(seed) ^ h(tag))`` with ``h`` = crc32 for strings."""
    t = zlib.crc32(tag.encode()) if isinstance(tag, str) else int(tag)
    return _splitmix64(_splitmix64(int(seed) & _MASK) ^ (t & _MASK))


def stream(seed: int, *tags) -> np.random.Generator:
    s = int(seed)
    for t in tags:
        s = mix64(s, t)
    return np.random.default_rng(s)
