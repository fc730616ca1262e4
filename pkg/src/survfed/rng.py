"""Deterministic named RNG streams.

All randomness in the package flows from a single user-supplied 64-bit seed.
Sub-streams are derived from (seed, *tags) where tags are short strings or
integers; the same tags always yield the same stream regardless of execution
order or parallel schedule, so distributed and local runs can be replayed.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def substream(seed: int, *tags) -> np.random.Generator:
    """Return the generator for the named sub-stream of ``seed``."""
    key = tuple(_tag_to_int(t) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def cell_tags(t: float, a: int) -> tuple:
    """Stable stream tags for a (time, arm) cell; times are keyed in micro-units."""
    return (int(round(float(t) * 1e6)), int(a))
