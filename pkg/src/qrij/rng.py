"""Named, reproducible random streams."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(seed: int, *path) -> np.random.Generator:
    """Independent generator for ``(seed, *path)``; path items are ints or str tags.

    Streams for distinct paths never overlap, and adding a new consumer with
    a new tag does not disturb existing ones.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
