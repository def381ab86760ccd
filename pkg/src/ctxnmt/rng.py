"""Seeded, platform-independent random streams.

Every stochastic component (dropout, Gaussian noise, random contexts, batch
shuffling, corpus generation) draws from an :class:`RngStream`.  Streams are
backed by numpy's Philox counter-based generator, whose output depends only
on the key and counter, never on the host platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10"


class RngStream:
    """A reproducible random stream identified by ``(seed, algorithm, counter)``."""

    algorithm = ALGORITHM

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._bitgen = np.random.Philox(key=self.seed)
        self._gen = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        """Number of 256-bit Philox blocks consumed so far."""
        c = self._bitgen.state["state"]["counter"]
        return int(sum(int(v) << (64 * i) for i, v in enumerate(c)))

    def child(self, name: str) -> "RngStream":
        """Derive an independent stream keyed by ``(seed, name)``.

        Children do not consume draws from the parent, so adding a new
        consumer never perturbs the sequence seen by existing ones.
        """
        h = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
        return RngStream(int.from_bytes(h[:8], "little"))

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Uniform draws in ``[0, 1)``."""
        return self._gen.random(shape, dtype=dtype)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, algorithm={self.algorithm!r}, counter={self.counter})"
