"""Named, seedable random streams.

A stream is identified by a root seed plus a path of names/integers, e.g.
``stream(7, "search", "noise", epoch, step)``.  The same path always yields
the same bits; distinct paths are statistically independent.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream path integers must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *(_key(p) for p in path)])


def stream(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *path))


def derive_seed(seed: int, *path) -> int:
    """A fresh 31-bit integer seed for a child run."""
    return int(seed_sequence(seed, *path).generate_state(1)[0] & 0x7FFFFFFF)
