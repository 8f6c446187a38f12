"""Deterministic sub-seeds: one user seed fans out to every component."""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit seed that depends only on ``seed`` and the (str or int) keys."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        words.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key))
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0] >> np.uint64(1))
