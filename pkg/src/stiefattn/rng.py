"""Seeded xoshiro256++ generator.

The generation rule is fixed so calibration data and weights are
reproducible by any implementation:

* State seeding: four successive outputs of splitmix64 started at ``seed``.
* ``next_u64``: ``result = rotl(s0 + s3, 23) + s0``; then
  ``t = s1 << 17; s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t;
  s3 = rotl(s3, 45)`` (all arithmetic modulo 2**64).
* ``uniform``: ``(next_u64() >> 11) * 2**-53`` in ``[0, 1)``.
* ``normal``: Box-Muller on consecutive uniforms ``u1, u2``:
  ``r = sqrt(-2 ln(1 - u1))`` then ``r cos(2 pi u2)``, ``r sin(2 pi u2)``,
  emitted in that order; arrays are filled in row-major order.
* ``below(n)``: ``(next_u64() * n) >> 64``.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + _GOLDEN) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def derive_seed(seed: int, *path: int) -> int:
    """Deterministically derive a child seed from ``seed`` and integer labels."""
    x = seed & MASK64
    for label in path:
        _, x = _splitmix64(x ^ (label & MASK64))
    return x


class RngState:
    """xoshiro256++ stream. Not thread-safe; give each worker its own."""

    def __init__(self, seed: int = 0):
        self.seed = seed & MASK64
        x = self.seed
        state = []
        for _ in range(4):
            x, z = _splitmix64(x)
            state.append(z)
        self._s = state
        self._spare: float | None = None

    def child(self, *path: int) -> "RngState":
        return RngState(derive_seed(self.seed, *path))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        t = (s0 + s3) & MASK64
        result = ((((t << 23) | (t >> 41)) & MASK64) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``, swapping from the top down."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def normal(self, shape: int | tuple[int, ...] = ()) -> np.ndarray:
        """Standard normal draws as a float64 array of ``shape``."""
        size = int(np.prod(shape)) if shape != () else 1
        out = [0.0] * size
        s0, s1, s2, s3 = self._s
        i = 0
        spare = self._spare
        if spare is not None and size > 0:
            out[0] = spare
            spare = None
            i = 1
        # Inlined generator loop; identical to calling uniform() twice.
        while i < size:
            us = []
            for _ in range(2):
                t = (s0 + s3) & MASK64
                r = ((((t << 23) | (t >> 41)) & MASK64) + s0) & MASK64
                t = (s1 << 17) & MASK64
                s2 ^= s0
                s3 ^= s1
                s1 ^= s2
                s0 ^= s3
                s2 ^= t
                s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
                us.append((r >> 11) * _INV_2_53)
            rad = math.sqrt(-2.0 * math.log(1.0 - us[0]))
            ang = _TWO_PI * us[1]
            out[i] = rad * math.cos(ang)
            if i + 1 < size:
                out[i + 1] = rad * math.sin(ang)
            else:
                spare = rad * math.sin(ang)
            i += 2
        self._s = [s0, s1, s2, s3]
        self._spare = spare
        arr = np.array(out, dtype=np.float64)
        return arr.reshape(shape) if shape != () else arr[0]
