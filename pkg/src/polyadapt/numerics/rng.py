"""Seeded random streams.

Backed by numpy's Philox-4x64 counter-based bit generator, which yields the
same stream for the same seed on every platform. Child streams are derived
with ``hash64(parent_seed, index)`` (first 8 bytes of BLAKE2b, little-endian).
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1


def hash64(*parts: int) -> int:
    payload = b"".join(struct.pack("<Q", int(p) & MASK64) for p in parts)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, index: int) -> "Rng":
        return Rng(hash64(self.seed, index))

    def normal(self, shape, std=1.0):
        return self._gen.standard_normal(shape) * std

    def truncated_normal(self, shape, std=0.02, bound=2.0):
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, n, size=None, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)
