"""Deterministic, hierarchically splittable random streams.

Every stochastic choice in the package (weight init, diffusion noise,
timesteps, condition drop, data splits) draws from an `RngStream` derived
from a user seed and a named path, so results are reproducible regardless
of evaluation order, batching, or process count.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_ints(key: tuple) -> tuple[int, ...]:
    """Map a mixed str/int key path to a stable tuple of uint32 words."""
    words: list[int] = []
    for part in key:
        if isinstance(part, (bool, int, np.integer)):
            value = int(part)
            words.append(value & 0xFFFFFFFF)
            words.append((value >> 32) & 0xFFFFFFFF)
        elif isinstance(part, str):
            words.append(zlib.crc32(part.encode("utf-8")))
        else:
            raise TypeError(f"rng key parts must be str or int, got {type(part)!r}")
    return tuple(words)


class RngStream:
    """A named substream of a seeded PCG64 generator.

    Identical (seed, path, draw counter) always yields identical values.
    `substream` derives statistically independent child streams; children
    never consume draws from the parent.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self.counter = 0
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key_ints(self.path)))
        )

    def substream(self, *key) -> "RngStream":
        return RngStream(self.seed, self.path + key)

    def normal(self, *shape: int) -> np.ndarray:
        self.counter += 1
        return self._gen.standard_normal(shape, dtype=np.float64)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray | float:
        self.counter += 1
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        self.counter += 1
        return self._gen.choice(n, size=size, replace=replace)

    def bernoulli(self, p: float, size=None) -> np.ndarray | bool:
        self.counter += 1
        draw = self._gen.uniform(0.0, 1.0, size=size)
        return draw < p

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, path={self.path}, counter={self.counter})"
