"""Splittable counter-based randomness.

Every source of stochasticity in the package (noise draws, timestep
sampling, data order, world generation) flows through an `Rng`. A stream
is identified by (seed, path of names); the underlying generator is
Philox keyed by a SHA-256 digest of that identity, so any stream can be
recreated from scratch. Training loops derive a fresh child per step,
which is what makes mid-run resume bitwise exact: there is no hidden
generator state to carry, only the step index.
"""
from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """A named node in a deterministic randomness tree."""

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, *names) -> "Rng":
        """Derive an independent stream; names may be str or int."""
        return Rng(self.seed, self.path + tuple(str(n) for n in names))

    def np(self) -> np.random.Generator:
        """A fresh numpy Generator for this node. Same node, same stream."""
        ident = repr((self.seed, self.path)).encode()
        key = int.from_bytes(hashlib.sha256(ident).digest()[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '.'})"
