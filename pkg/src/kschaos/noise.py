"""Replayable Brownian increments from a counter-based generator.

Every block of draws is addressed by ``(seed, replica, stream, step)`` and
produced by a fresh Philox instance positioned at that counter, so the draws
do not depend on evaluation order, on which process consumes them, or on how
many threads are running.  Within a block, particle ``i`` gets entries
``[i, 0]`` and ``[i, 1]``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1

# stream tags kept in the third counter word
STREAM_BROWNIAN = 0
STREAM_INITIAL = 1
STREAM_AUX = 2


def mix64(*words: int) -> int:
    """Deterministic 64-bit hash of a tuple of integers (stable across runs)."""
    payload = b"".join(int(w & MASK64).to_bytes(8, "little") for w in words)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def derive_replica_seed(seed: int, cell: int, replica: int) -> int:
    return (seed ^ mix64(cell, replica)) & MASK64


@dataclass(frozen=True)
class NoisePlan:
    seed: int
    h: float
    replica: int = 0

    def __post_init__(self):
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.h < 0:
            raise ValueError("step size must be non-negative")

    def generator(self, step: int, stream: int = STREAM_BROWNIAN) -> np.random.Generator:
        key = np.array([self.seed, self.replica & MASK64], dtype=np.uint64)
        counter = np.array([0, 0, stream & MASK64, step & MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def normals(self, n: int, step: int, stream: int = STREAM_BROWNIAN) -> np.ndarray:
        """Standard normal block of shape (n, 2) for one step."""
        return self.generator(step, stream).standard_normal((n, 2))

    def increments(self, n: int, step: int) -> np.ndarray:
        """Brownian increments ``sqrt(2 h) xi`` for step ``step``."""
        return math.sqrt(2.0 * self.h) * self.normals(n, step)

    def for_replica(self, replica: int) -> "NoisePlan":
        return NoisePlan(self.seed, self.h, replica)
