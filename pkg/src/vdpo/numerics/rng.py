"""Seeded randomness.

All randomness in the package flows through :class:`Rng`, a thin wrapper
over numpy's PCG64 bit generator (PCG XSL-RR 128/64). PCG64 output for a
given seed is fixed by numpy's stability guarantee, so identical seeds give
identical streams on every platform.
"""

import numpy as np

ALGORITHM = "PCG64"


class Rng:
    def __init__(self, seed, *keys):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *self.keys])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys):
        """Independent stream derived from this one's seed and ``keys``.
        Does not advance the parent stream."""
        return Rng(self.seed, *self.keys, *keys)

    def normal(self, size=None, scale=1.0):
        return self._gen.normal(0.0, scale, size)

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, p=None):
        return int(self._gen.choice(n, p=p))

    def __repr__(self):
        return f"Rng(seed={self.seed}, keys={self.keys}, algorithm={ALGORITHM})"
