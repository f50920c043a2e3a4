"""Keyed random streams.

A stream is a seed plus a tuple of integer keys. Children extend the key, and
the leaf generator is seeded from ``SeedSequence(seed, spawn_key=key)``, so any
unit of work (say, chunk 3 of level 5 in round 2) gets its own independent
generator that can be rebuilt without replaying anything else. Results that
are merged in key order are therefore independent of how many workers ran.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    seed: int
    key: tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if any(k < 0 for k in self.key):
            raise ValueError("stream keys must be non-negative")

    def child(self, *key: int) -> RngStream:
        return RngStream(self.seed, self.key + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept either a stream or an already-built generator."""
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def as_stream(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError(f"expected RngStream or integer seed, got {type(rng).__name__}")
