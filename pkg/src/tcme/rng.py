"""Splittable, reproducible random streams.

Every stream is identified by ``(seed, path)``. Draws come from numpy's
Philox counter-based generator keyed by a ``SeedSequence`` built from the
seed and the path, so a substream can be re-derived anywhere without shared
state.
"""
from __future__ import annotations

import numpy as np


class RngStream:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.path + (int(index),))

    def normal(self, mean=0.0, sd=1.0, size=None):
        return self.gen.normal(mean, sd, size)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        return self.gen.uniform(lo, hi, size)

    def choice(self, a, size, replace=False):
        return self.gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def substream(stream: RngStream, index: int) -> RngStream:
    return stream.substream(index)


def normal(stream: RngStream, mean: float = 0.0, sd: float = 1.0, size=None):
    if np.any(np.asarray(sd) < 0):
        raise ValueError("sd must be >= 0")
    return stream.normal(mean, sd, size)


def uniform(stream: RngStream, lo: float = 0.0, hi: float = 1.0, size=None):
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError("lo must be <= hi")
    return stream.uniform(lo, hi, size)
