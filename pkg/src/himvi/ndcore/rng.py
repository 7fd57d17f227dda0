"""Counter-based, splittable random streams.

A stream is a Philox generator keyed by ``(seed, stream_id)``. Child streams
are derived from the parent's identity and a tuple of integers, never from the
parent's state, so the draws a child produces do not depend on how many draws
were taken from the parent or from sibling streams.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


class RngStream:
    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK
        self.stream_id = int(stream_id) & _MASK
        key = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,)).generate_state(2, np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, *keys: int) -> "RngStream":
        mixed = np.random.SeedSequence([self.stream_id, *[int(k) & _MASK for k in keys]]).generate_state(2, np.uint32)
        return RngStream(self.seed, (int(mixed[0]) << 32) | int(mixed[1]))

    @property
    def counter(self):
        return self.generator.bit_generator.state["state"]["counter"].copy()

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.generator.permutation(x)
