"""Seeded random number generation with a reproducible cross-platform stream."""

from __future__ import annotations

import numpy as np


class Rng:
    """Thin wrapper over numpy PCG64 pinning the stream to a 64-bit seed.

    The same seed yields a bit-identical draw sequence across runs, processes
    and platforms (PCG64 output is platform independent).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def split(self, salt: int) -> "Rng":
        """Derive an independent child stream; deterministic in (seed, salt)."""
        return Rng(np.random.SeedSequence([self.seed, int(salt)]).generate_state(1)[0])
