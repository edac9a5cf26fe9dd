"""Seed handling.

Every random stream in a run is derived from one top-level seed. A module asks
for its stream by name; the name is hashed with CRC-32 (stable across Python
versions and processes, unlike ``hash``) and mixed into a numpy SeedSequence.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the component called ``name``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), stream_id(name)]))


def as_generator(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
