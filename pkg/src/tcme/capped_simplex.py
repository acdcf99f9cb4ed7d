"""Euclidean projection onto the capped simplex {w : sum(w) = h, 0 <= w <= 1}."""
from __future__ import annotations

import math

import numpy as np


class InfeasibleSetError(ValueError):
    pass


def project_capped_simplex(v, h: float) -> np.ndarray:
    """Project ``v`` onto the capped simplex with budget ``h``.

    The projection is ``clip(v + mu, 0, 1)`` where ``mu`` solves
    ``sum(clip(v + mu, 0, 1)) = h``. That sum is piecewise linear and
    nondecreasing in ``mu`` with breakpoints at ``-v`` and ``1 - v``; the
    breakpoints are sorted once and the matching segment is found by a scan,
    so the result is exact up to rounding.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    n = v.size
    if not 0 <= h <= n:
        raise InfeasibleSetError(f"budget h={h} outside [0, {n}]")
    if n == 0:
        return v.copy()

    bp = np.concatenate([-v, 1.0 - v])
    dslope = np.concatenate([np.ones(n), -np.ones(n)])
    order = np.argsort(bp, kind="stable")
    bp, dslope = bp[order], dslope[order]
    # slope on the segment to the right of each breakpoint
    slope = np.cumsum(dslope)
    total = np.concatenate([[0.0], np.cumsum(slope[:-1] * np.diff(bp))])

    k = int(np.searchsorted(total, h, side="left"))
    if k == 0:
        mu = bp[0]
    elif k >= bp.size:
        mu = bp[-1]
    else:
        s = slope[k - 1]
        mu = bp[k - 1] + (h - total[k - 1]) / s if s > 0 else bp[k - 1]
    w = np.clip(v + mu, 0.0, 1.0)
    # the scan's cumulative sums round; recompute mu exactly on the free set
    free = (w > 0.0) & (w < 1.0)
    if free.any():
        mu = (h - np.count_nonzero(w == 1.0) - math.fsum(v[free])) / free.sum()
        w[free] = np.clip(v[free] + mu, 0.0, 1.0)
    return w
