"""Parametric bootstrap of the whole (trimmed) fitting procedure."""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data_model import MEDataset, ModelSpec, Theta, variances
from .obs_models import evaluate
from .rng import RngStream
from .trimming import FitResult, fit_trimmed

QUANTILE_LEVELS = (0.025, 0.5, 0.975)
FAILURE_WARNING = 0.2


@dataclass
class BootstrapResult:
    samples: np.ndarray          # (N, k_theta), NaN rows for failed replications
    ok: np.ndarray               # converged mask
    quantiles: np.ndarray        # (3, k_theta) at QUANTILE_LEVELS
    failures: int
    seed: int
    sizes: tuple[int, int, int]

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def warning(self) -> bool:
        return self.failures > FAILURE_WARNING * self.n

    @property
    def status(self) -> str:
        return "warning" if self.warning else "ok"

    def thetas(self) -> list[Theta]:
        return [Theta.from_flat(x, *self.sizes) for x in self.samples[self.ok]]


def simulate_replicate(theta: Theta, data: MEDataset, spec: ModelSpec, stream: RngStream,
                       random_effects: bool = True) -> np.ndarray:
    """``y = f(beta) + Z u + eps`` with ``u ~ N(0, diag(gamma))``, ``eps ~ N(0, Lambda)``."""
    mean = evaluate(spec.obs_model, theta.beta, data)
    lam = variances(theta, data, spec.error)
    u = stream.substream(0).normal(0.0, 1.0, size=(data.m, data.k_gamma))
    u = u * np.sqrt(np.maximum(theta.gamma, 0.0))
    eps = stream.substream(1).normal(0.0, 1.0, size=data.n_total) * np.sqrt(lam)
    re = np.einsum("nj,nj->n", data.Z, u[data.group_index]) if random_effects else 0.0
    return mean + re + eps


def type7_quantiles(x: np.ndarray, levels=QUANTILE_LEVELS) -> np.ndarray:
    """Column quantiles by linear interpolation between order statistics."""
    if x.shape[0] == 0:
        return np.full((len(levels), x.shape[1]), np.nan)
    return np.quantile(x, levels, axis=0, method="linear")


def parametric_bootstrap(fit: FitResult, data: MEDataset, spec: ModelSpec, N: int = 1000,
                         seed: int = 0, threads: int = 1) -> BootstrapResult:
    """Refit ``N`` datasets simulated from the fitted model.

    Replication ``r`` draws from the substream ``(seed, r)`` only, and refits
    with the same spec (trimming included) starting from the point estimate
    with the weights reset to ``(h / n) * 1``. Failed or non-converged refits
    are counted and excluded from the quantiles.
    """
    theta_hat = fit.theta
    sizes = spec.sizes(data)
    root = RngStream(seed)

    def one(r):
        y = simulate_replicate(theta_hat, data, spec, root.substream(r))
        try:
            res = fit_trimmed(data.replace(y=y), spec, theta0=theta_hat)
        except Exception:  # counted as a failed replication
            return None
        return res.theta.flat() if res.converged else None

    if threads == 0:
        threads = os.cpu_count() or 1
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            out = list(ex.map(one, range(N)))
    else:
        out = [one(r) for r in range(N)]
    k = sum(sizes)
    samples = np.full((N, k), np.nan)
    ok = np.zeros(N, bool)
    for r, x in enumerate(out):
        if x is not None:
            samples[r], ok[r] = x, True
    res = BootstrapResult(samples, ok, type7_quantiles(samples[ok]), int(N - ok.sum()),
                          seed, sizes)
    if res.warning:
        warnings.warn(f"{res.failures} of {N} bootstrap refits failed", RuntimeWarning)
    return res


def curve_bands(result: BootstrapResult, curve, loading=None, levels=QUANTILE_LEVELS):
    """Pointwise bands of a fitted curve across bootstrap replications.

    Parameters
    ----------
    curve : callable
        ``beta -> values`` on a fixed grid (e.g. the log relative risk).
    loading : array (grid, k_gamma), optional
        Random-effect loading on the grid. The heterogeneity band adds one
        draw ``loading @ u`` with ``u ~ N(0, diag(gamma_r))`` per replication.

    Returns
    -------
    fixed : array (3, grid)
        Quantiles of ``curve(beta_r)`` (random effects held at 0).
    full : array (3, grid) or None
        Quantiles including the random-effect draw.
    """
    kb, kg, _ = result.sizes
    rows = np.flatnonzero(result.ok)
    curves = np.array([curve(result.samples[r, :kb]) for r in rows])
    if curves.size == 0:
        return None, None
    fixed = np.quantile(curves, levels, axis=0, method="linear")
    if loading is None:
        return fixed, None
    L = np.asarray(loading, float).reshape(curves.shape[1], kg)
    root = RngStream(result.seed)
    full = np.empty_like(curves)
    for i, r in enumerate(rows):
        g = np.maximum(result.samples[r, kb:kb + kg], 0.0)
        u = root.substream(r).substream(2).normal(0.0, 1.0, size=kg) * np.sqrt(g)
        full[i] = curves[i] + L @ u
    return fixed, np.quantile(full, levels, axis=0, method="linear")
