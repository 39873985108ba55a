"""Seeded counter-based random streams.

Backed by numpy's Philox (a counter-based generator), which produces the
same stream on every platform for a given key. Substreams are derived by
hashing ``(seed, *keys)`` so that e.g. the batch at step ``k`` does not
depend on how many draws earlier steps made.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        key = ss.generate_state(2, dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, size=None) -> np.ndarray | float:
        return self._gen.random(size)

    def normal(self, size=None, std: float = 1.0) -> np.ndarray | float:
        return self._gen.standard_normal(size) * std

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size=None, replace: bool = True):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def categorical(self, probs: np.ndarray) -> int:
        """Inverse-CDF draw from a probability vector."""
        cdf = np.cumsum(probs)
        u = self._gen.random() * cdf[-1]
        return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))

    def raw_u64(self, n: int) -> np.ndarray:
        return self._gen.integers(0, np.iinfo(np.uint64).max, size=n, dtype=np.uint64, endpoint=True)
