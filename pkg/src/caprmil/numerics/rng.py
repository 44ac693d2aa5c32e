"""Seeded counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, *path)``, so a named
sub-stream (``rng.spawn("dropout")``) never perturbs a sibling stream and the
draw sequence depends only on the key, not on call order elsewhere.
"""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import default_dtype


def _key_part(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream keys must be non-negative")
    return part


class Rng:
    def __init__(self, seed: int, path: tuple = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.path = tuple(_key_part(p) for p in path)
        entropy = [seed & 0xFFFFFFFF, seed >> 32, *self.path]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    def spawn(self, *keys) -> "Rng":
        """Independent child stream addressed by ``keys``."""
        return Rng(self.seed, self.path + tuple(_key_part(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, scale: float = 1.0, dtype=None) -> np.ndarray:
        out = self._gen.standard_normal(shape) * scale
        return out.astype(dtype or default_dtype(), copy=False)

    def uniform(self, low: float, high: float, shape, dtype=None) -> np.ndarray:
        out = self._gen.uniform(low, high, shape)
        return out.astype(dtype or default_dtype(), copy=False)

    def random(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.random(shape, dtype=dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
