"""Fixed-effect observation models f(beta) and their Jacobians.

Each model holds one design row per observation, in the dataset's flat
(group, row) order, and evaluates all observations at once. Per-group
access goes through :func:`f_eval` / :func:`f_jacobian`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data_model import MEDataset
from .splines import SplineBasis, average_integral_design, build_design

DOMAIN_EPS = 1e-10


class DomainError(ValueError):
    """f(beta) is undefined at some observation (flat index ``index``)."""

    def __init__(self, index: int, message: str, where: tuple[str, int] | None = None):
        self.index = int(index)
        self.where = where
        loc = f" (group {where[0]!r}, row {where[1]})" if where else f" (observation {index})"
        super().__init__(message + loc)


def _rows(X) -> np.ndarray:
    X = np.array(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    X.setflags(write=False)
    return X


class LinearModel:
    """f = X @ beta."""

    kind = "linear"

    def __init__(self, X):
        self.X = _rows(X)

    @classmethod
    def from_dataset(cls, data: MEDataset, columns: Sequence[str] = (),
                     intercept: bool = True) -> "LinearModel":
        cols = [np.ones(data.n_total)] if intercept else []
        cols += [data.covariate(c) for c in columns]
        return cls(np.column_stack(cols))

    @property
    def k_beta(self) -> int:
        return self.X.shape[1]

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def f(self, beta) -> np.ndarray:
        return self.X @ beta

    def jacobian(self, beta) -> np.ndarray:
        return self.X

    def default_beta0(self, y) -> np.ndarray:
        return np.linalg.lstsq(self.X, y, rcond=None)[0]

    def subset(self, keep) -> "LinearModel":
        return LinearModel(self.X[keep])


def _safe_dot(X, beta) -> np.ndarray:
    s = X @ beta
    bad = np.flatnonzero(~(s > DOMAIN_EPS))
    if bad.size:
        raise DomainError(bad[0], f"nonpositive risk <x, beta> = {s[bad[0]]:.3g}")
    return s


class LogSplineModel:
    """f = log(<x, beta>) with one spline design row per observation."""

    kind = "log_spline"

    def __init__(self, X):
        self.X = _rows(X)

    @classmethod
    def from_exposures(cls, basis: SplineBasis, exposures) -> "LogSplineModel":
        return cls(build_design(basis, exposures))

    @property
    def k_beta(self) -> int:
        return self.X.shape[1]

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def f(self, beta) -> np.ndarray:
        return np.log(_safe_dot(self.X, beta))

    def jacobian(self, beta) -> np.ndarray:
        return self.X / _safe_dot(self.X, beta)[:, None]

    def default_beta0(self, y) -> np.ndarray:
        return np.ones(self.k_beta)

    def subset(self, keep) -> "LogSplineModel":
        return LogSplineModel(self.X[keep])


class LogRatioModel:
    """f = log(<x_alt, beta>) - log(<x_ref, beta>)."""

    kind = "log_ratio"

    def __init__(self, X_alt, X_ref):
        self.X_alt = _rows(X_alt)
        self.X_ref = _rows(X_ref)
        if self.X_alt.shape != self.X_ref.shape:
            raise ValueError("alternative and reference designs differ in shape")

    @classmethod
    def from_intervals(cls, basis: SplineBasis, alt, ref) -> "LogRatioModel":
        """``alt`` / ``ref``: sequences of (lo, hi) exposure intervals; averages over each."""
        xa = np.array([average_integral_design(basis, lo, hi) for lo, hi in alt])
        xr = np.array([average_integral_design(basis, lo, hi) for lo, hi in ref])
        return cls(xa, xr)

    @property
    def k_beta(self) -> int:
        return self.X_alt.shape[1]

    @property
    def n_rows(self) -> int:
        return self.X_alt.shape[0]

    def f(self, beta) -> np.ndarray:
        return np.log(_safe_dot(self.X_alt, beta)) - np.log(_safe_dot(self.X_ref, beta))

    def jacobian(self, beta) -> np.ndarray:
        sa = _safe_dot(self.X_alt, beta)
        sr = _safe_dot(self.X_ref, beta)
        return self.X_alt / sa[:, None] - self.X_ref / sr[:, None]

    def default_beta0(self, y) -> np.ndarray:
        return np.ones(self.k_beta)

    def subset(self, keep) -> "LogRatioModel":
        return LogRatioModel(self.X_alt[keep], self.X_ref[keep])


def _locate(err: DomainError, data: MEDataset) -> DomainError:
    return DomainError(err.index, str(err).split(" (")[0], data.locate(err.index))


def evaluate(model, beta, data: MEDataset | None = None) -> np.ndarray:
    """All observations at once; domain errors name (group, row) when ``data`` is given."""
    try:
        return model.f(np.asarray(beta, float))
    except DomainError as err:
        raise (_locate(err, data) if data is not None else err) from None


def evaluate_jacobian(model, beta, data: MEDataset | None = None) -> np.ndarray:
    try:
        return model.jacobian(np.asarray(beta, float))
    except DomainError as err:
        raise (_locate(err, data) if data is not None else err) from None


def f_eval(model, beta, data: MEDataset, i: int) -> np.ndarray:
    return evaluate(model, beta, data)[data.group_slice(i)]


def f_jacobian(model, beta, data: MEDataset, i: int) -> np.ndarray:
    return evaluate_jacobian(model, beta, data)[data.group_slice(i)]


def slope_loadings(exposure) -> np.ndarray:
    """Random-effect column for a random slope on exposure (direct log-risk model)."""
    return np.asarray(exposure, float).reshape(-1, 1)


def ratio_loadings(alt, ref) -> np.ndarray:
    """Random-effect column ``alt - ref`` exposure for ratio observations.

    Intervals are reduced to their midpoints.
    """
    def mid(v):
        v = np.asarray(v, float)
        return v.mean(axis=1) if v.ndim == 2 else v
    return (mid(alt) - mid(ref)).reshape(-1, 1)
