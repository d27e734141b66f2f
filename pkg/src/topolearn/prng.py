"""Portable pseudo-random stream: SplitMix64 seeding feeding xoshiro256**.

Every random draw in the package goes through :class:`Rng`, so a run is a pure
function of its integer seed on any platform.
"""
from __future__ import annotations

import math
from collections.abc import Sequence
from typing import TypeVar

import numpy as np

T = TypeVar("T")

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        # FNV-1a, stable across processes unlike hash()
        h = 0xCBF29CE484222325
        for b in key.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & MASK64
        return h
    return int(key) & MASK64


class Rng:
    """xoshiro256** generator seeded from a 64-bit integer via SplitMix64."""

    def __init__(self, seed: int) -> None:
        sm = int(seed) & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        if not any(s):
            s[0] = 1
        self._s = s
        self._spare: float | None = None

    @classmethod
    def derive(cls, seed: int, *keys: int | str) -> Rng:
        """Independent stream for ``(seed, *keys)``, e.g. ``derive(seed, "shuffle", epoch)``."""
        state = int(seed) & MASK64
        for key in keys:
            state, out = splitmix64(state ^ _key_to_int(key))
            state = out
        return cls(state)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("randbelow requires n > 0")
        bits = n.bit_length()
        while True:
            r = self.next_u64() >> (64 - bits)
            if r < n:
                return r

    def normal(self) -> float:
        """Standard normal draw (Box-Muller, second value cached)."""
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normal_array(self, shape: tuple[int, ...], std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        out = np.fromiter((self.normal() for _ in range(n)), dtype=np.float64, count=n)
        return (out * std).reshape(shape)

    def uniform_array(self, n: int) -> np.ndarray:
        return np.fromiter((self.random() for _ in range(n)), dtype=np.float64, count=n)

    def permutation(self, n: int) -> np.ndarray:
        perm = list(range(n))
        self.shuffle(perm)
        return np.asarray(perm, dtype=np.int64)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items: Sequence[T]) -> T:
        return items[self.randbelow(len(items))]
