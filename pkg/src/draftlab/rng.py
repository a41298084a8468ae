"""Deterministic, labelled random streams.

Every random draw in the package comes from an RngStream. Streams are
derived by label (e.g. ``root.child("init/wq")``), so adding a new
consumer never shifts the draws seen by an existing one. The underlying
bit generator is numpy's counter-based Philox, which is documented to
produce identical sequences across platforms for a given key.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

ALGORITHM = "philox-4x64"

_MASK64 = (1 << 64) - 1


def _derive(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK64


@dataclass(frozen=True)
class RngStream:
    """A named deterministic random stream identified by a 64-bit seed."""

    seed: int
    algorithm: str = field(default=ALGORITHM)

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        if self.algorithm != ALGORITHM:
            raise ValueError(f"unknown rng algorithm: {self.algorithm!r}")

    def child(self, label: str) -> "RngStream":
        """Derive an independent sub-stream for one named use."""
        return RngStream(_derive(self.seed, label))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=self.seed))

    # Convenience draws; each call restarts the stream, so call sites that
    # need several draws should take one generator() and reuse it.
    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator().normal(0.0, scale, size=shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self.generator().uniform(0.0, 1.0, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)
