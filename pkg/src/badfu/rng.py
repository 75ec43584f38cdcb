"""Seed derivation.

Every random stream in a run is seeded from ``derive_seed(master, *tags)``.
Tags are folded in order: strings are hashed with 64-bit FNV-1a over their
UTF-8 bytes, integers are taken modulo 2**64, and each tag is combined with
the running state through the SplitMix64 finalizer::

    state = splitmix64(state ^ splitmix64(tag_word + GOLDEN))

with ``GOLDEN = 0x9E3779B97F4A7C15`` and the standard SplitMix64 constants
``0xBF58476D1CE4E5B9`` / ``0x94D049BB133111EB`` (shifts 30, 27, 31).
The resulting 64-bit word seeds a numpy ``PCG64`` generator.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def splitmix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def _tag_word(tag: int | str) -> int:
    if isinstance(tag, str):
        return fnv1a64(tag)
    if isinstance(tag, (int, np.integer)) and not isinstance(tag, bool):
        return int(tag) & MASK64
    raise TypeError(f"seed tags must be int or str, got {type(tag).__name__}")


def derive_seed(master: int, *tags: int | str) -> int:
    """Derive a 64-bit seed from ``master`` and an ordered tuple of tags."""
    state = splitmix64(int(master) & MASK64)
    for tag in tags:
        state = splitmix64(state ^ splitmix64(_tag_word(tag)))
    return state


def make_rng(master: int, *tags: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *tags)))
