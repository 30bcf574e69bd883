"""Counter-based random streams split off a single seed by string keys."""
from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode())


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *keys)``; no ambient entropy."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(_key(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def derive_int(seed: int, *keys) -> int:
    """A 31-bit integer seed derived from ``(seed, *keys)``."""
    return int(stream(seed, *keys).integers(0, 2**31 - 1))
