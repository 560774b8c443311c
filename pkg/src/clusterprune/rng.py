"""Seeded random streams.

All randomness goes through :class:`Rng`, a thin wrapper over numpy's
Philox4x64 counter-based bit generator. Philox output depends only on the
key and counter, so a given seed yields the same stream on every platform.
Independent sub-streams are derived by tag through ``SeedSequence`` spawn
keys rather than by offsetting seeds.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int, tags: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self.tags = tuple(int(t) for t in tags)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.tags)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def derive(self, *tags: int) -> "Rng":
        """Independent stream keyed by ``tags``; does not advance this one."""
        return Rng(self.seed, self.tags + tuple(tags))

    def normal(self, size, scale=1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, size, low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly."""
        return self._gen.choice(n, size=k, replace=False)
