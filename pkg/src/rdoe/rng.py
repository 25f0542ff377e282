"""Portable seeded random streams.

The generator is xorshift64* (Vigna, 2016) with its state initialised by one
round of splitmix64 applied to ``seed`` and a stream label, so that seed 0 is
valid and distinct labels give decorrelated streams.  Uniforms use the top 53
bits; normal variates come from the Box-Muller transform, two uniforms per
generated pair.  All arithmetic is on Python ints masked to 64 bits, so the
output is identical on every platform.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


class XorShift64Star:
    """xorshift64* generator; ``stream`` selects an independent sub-stream."""

    def __init__(self, seed: int, stream: int = 0):
        state = _splitmix64((int(seed) & _MASK) ^ _splitmix64(int(stream) & _MASK))
        self._state = state or 0x9E3779B97F4A7C15
        self._spare: float | None = None

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & _MASK
        x ^= x >> 27
        self._state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK

    def uniform(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)])

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1]
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int) -> np.ndarray:
        return np.array([self.normal() for _ in range(n)])
