"""Seed fan-out: every random stream is keyed by (seed, purpose, index)."""
import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for the sub-stream named by ``keys``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys)))
