"""Seeded random streams.

Every stochastic routine takes a :class:`RandomSource`; nothing touches the
global numpy RNG. Child streams are derived deterministically from the parent
seed plus a key, so per-class or per-purpose streams do not depend on how many
draws other streams have made.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


class RandomSource:
    """A PCG64 stream identified by a 64-bit seed and an optional key path."""

    def __init__(self, seed: int = 0, _path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys) -> "RandomSource":
        """Independent stream for ``keys`` (ints or strings)."""
        return RandomSource(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    # thin pass-throughs for the draws the package needs
    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def beta(self, a, b, size=None):
        return self.generator.beta(a, b, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, path={self.path})"


def as_source(rng) -> RandomSource:
    """Accept a RandomSource or an integer seed."""
    if isinstance(rng, RandomSource):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RandomSource(int(rng))
    raise TypeError(f"expected RandomSource or int seed, got {type(rng).__name__}")
