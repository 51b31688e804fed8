"""Seeding helpers: one run seed, per-purpose derived generators.

Every source of randomness in the project flows through `named_rng`, so a
module can never silently share entropy with another: the stream is fixed
by (seed, *names), independent of call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def named_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Deterministic generator for a (seed, names...) key.

    String names are hashed with crc32 so the key is stable across runs
    and platforms (Python's builtin hash is salted per process).
    """
    key = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, str):
            key.append(zlib.crc32(name.encode("utf-8")))
        else:
            key.append(int(name) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
