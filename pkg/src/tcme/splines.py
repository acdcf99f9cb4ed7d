"""Clamped B-spline bases, design matrices and shape constraints.

Index convention: with the clamped knot vector ``T`` (boundary knots repeated
``degree + 1`` times), basis function ``j`` is supported on
``[T[j], T[j + degree + 1]]``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data_model import GaussianPrior, LinearConstraintSet


class SplineDomainError(ValueError):
    pass


class SplineSpecError(ValueError):
    pass


def _bspline_values(T: np.ndarray, degree: int, x: np.ndarray) -> np.ndarray:
    """Cox-de Boor recursion on an arbitrary nondecreasing knot vector.

    Right-continuous; the right end of the knot vector is assigned to the
    last nonempty span so the final basis function equals 1 there.
    """
    x = np.atleast_1d(np.asarray(x, float))
    nspan = T.size - 1
    nonempty = np.flatnonzero(T[1:] > T[:-1])
    span = np.searchsorted(T, x, side="right") - 1
    span = np.clip(span, nonempty[0], nonempty[-1])
    B = np.zeros((x.size, nspan))
    B[np.arange(x.size), span] = 1.0
    for p in range(1, degree + 1):
        nb = nspan - p
        left = T[:nb]
        d1 = T[p:p + nb] - left
        d2 = T[p + 1:p + 1 + nb] - T[1:1 + nb]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(d1 > 0, (x[:, None] - left) / d1, 0.0)
            b = np.where(d2 > 0, (T[p + 1:p + 1 + nb] - x[:, None]) / d2, 0.0)
        B = a * B[:, :nb] + b * B[:, 1:nb + 1]
    return B


def _derivative_operator(T: np.ndarray, degree: int) -> np.ndarray:
    """Map coefficients of a degree-p spline on ``T`` to its derivative on ``T[1:-1]``."""
    dim = T.size - degree - 1
    D = np.zeros((dim - 1, dim))
    for j in range(dim - 1):
        span = T[j + degree + 1] - T[j + 1]
        if span > 0:
            D[j, j] = -degree / span
            D[j, j + 1] = degree / span
    return D


@dataclass(frozen=True)
class SplineBasis:
    """B-spline basis on ``knots`` (boundary knots included, strictly increasing)."""

    knots: np.ndarray
    degree: int = 3

    def __post_init__(self):
        knots = np.asarray(self.knots, float).reshape(-1)
        if knots.size < 2 or np.any(np.diff(knots) <= 0):
            raise SplineSpecError("knots must be strictly increasing with at least two entries")
        if int(self.degree) != self.degree or self.degree < 0:
            raise SplineSpecError("degree must be a nonnegative integer")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "degree", int(self.degree))

    @classmethod
    def from_quantiles(cls, exposures, quantiles, degree: int = 3,
                       lo: float | None = None, hi: float | None = None) -> "SplineBasis":
        """Interior knots at data quantiles; boundary knots at the data range."""
        x = np.asarray(exposures, float)
        lo = float(x.min()) if lo is None else lo
        hi = float(x.max()) if hi is None else hi
        interior = np.quantile(x, np.asarray(quantiles, float))
        return cls(np.concatenate([[lo], interior, [hi]]), degree)

    @property
    def interior(self) -> np.ndarray:
        return self.knots[1:-1]

    @property
    def n_segments(self) -> int:
        return self.knots.size - 1

    @property
    def dim(self) -> int:
        return self.interior.size + self.degree + 1

    @property
    def full_knots(self) -> np.ndarray:
        d = self.degree
        return np.concatenate([[self.knots[0]] * d, self.knots, [self.knots[-1]] * d])

    def _check_domain(self, t: np.ndarray) -> None:
        bad = np.flatnonzero((t < self.knots[0]) | (t > self.knots[-1]) | ~np.isfinite(t))
        if bad.size:
            raise SplineDomainError(
                f"exposure {t[bad[0]]} (row {bad[0]}) outside "
                f"[{self.knots[0]}, {self.knots[-1]}]")

    def derivative_matrix(self, order: int) -> tuple[np.ndarray, np.ndarray, int]:
        """``(D, T_r, degree - order)`` with ``D @ beta`` the coefficients of the
        ``order``-th derivative on knot vector ``T_r``."""
        if order > self.degree:
            raise SplineSpecError(f"derivative order {order} exceeds degree {self.degree}")
        T = self.full_knots
        D = np.eye(self.dim)
        for p in range(self.degree, self.degree - order, -1):
            D = _derivative_operator(T, p) @ D
            T = T[1:-1]
        return D, T, self.degree - order


def basis_eval(basis: SplineBasis, t: float) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, float))
    basis._check_domain(t)
    return _bspline_values(basis.full_knots, basis.degree, t)[0]


def build_design(basis: SplineBasis, exposures) -> np.ndarray:
    x = np.atleast_1d(np.asarray(exposures, float)).reshape(-1)
    basis._check_domain(x)
    return _bspline_values(basis.full_knots, basis.degree, x)


def derivative_design(basis: SplineBasis, exposures, order: int = 1) -> np.ndarray:
    """Rows ``x`` with ``x @ beta`` equal to the ``order``-th derivative at each exposure."""
    x = np.atleast_1d(np.asarray(exposures, float)).reshape(-1)
    basis._check_domain(x)
    if order == 0:
        return _bspline_values(basis.full_knots, basis.degree, x)
    D, T, deg = basis.derivative_matrix(order)
    return _bspline_values(T, deg, x) @ D


def _antiderivative_design(basis: SplineBasis, x: np.ndarray) -> np.ndarray:
    # int_{T0}^{x} B_j = (T[j+d+1] - T[j]) / (d+1) * sum_{i>j} B'_{i,d+1}(x)
    # with B' the degree d+1 basis on T extended by one knot at each end.
    d = basis.degree
    T = basis.full_knots
    Text = np.concatenate([[T[0]], T, [T[-1]]])
    B1 = _bspline_values(Text, d + 1, x)  # columns 0..dim
    tail = np.cumsum(B1[:, ::-1], axis=1)[:, ::-1]  # tail[:, i] = sum_{l>=i}
    scale = (T[d + 1:d + 1 + basis.dim] - T[:basis.dim]) / (d + 1)
    return tail[:, 1:basis.dim + 1] * scale


def average_integral_design(basis: SplineBasis, a0: float, a1: float) -> np.ndarray:
    """Row ``x`` with ``x @ beta`` the average of the spline over ``[a0, a1]``."""
    a0, a1 = float(a0), float(a1)
    basis._check_domain(np.array([a0, a1]))
    if a0 == a1:
        return basis_eval(basis, a0)
    if a0 > a1:
        raise SplineDomainError(f"interval [{a0}, {a1}] is reversed")
    F = _antiderivative_design(basis, np.array([a0, a1]))
    return (F[1] - F[0]) / (a1 - a0)


class ShapeKind(enum.Enum):
    INCREASING = "increasing"
    DECREASING = "decreasing"
    CONVEX = "convex"
    CONCAVE = "concave"
    LINEAR_TAIL = "linear_tail"


@dataclass(frozen=True)
class ShapeConstraint:
    kind: ShapeKind
    side: str = "right"

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", ShapeKind(self.kind))
        if self.side not in ("left", "right"):
            raise SplineSpecError("side must be 'left' or 'right'")

    @classmethod
    def parse(cls, text: str) -> "ShapeConstraint":
        """Accepts e.g. ``increasing``, ``concave``, ``linear_tail_right``."""
        text = text.strip().lower()
        if text.startswith("linear_tail"):
            side = text[len("linear_tail"):].lstrip("_") or "right"
            return cls(ShapeKind.LINEAR_TAIL, side)
        return cls(ShapeKind(text))


def _normalized(rows: np.ndarray) -> np.ndarray:
    scale = np.abs(rows).max(axis=1, keepdims=True)
    return rows / np.where(scale > 0, scale, 1.0)


def shape_constraints(basis: SplineBasis, cons) -> LinearConstraintSet:
    """``C @ beta <= c`` rows (beta-only) for a list of shape constraints.

    Second-derivative rows are the coefficients of f'' in its own B-spline
    basis, each rescaled to unit max-abs; since B-splines are nonnegative a
    sign on every coefficient bounds the sign of f'' everywhere.
    """
    dim = basis.dim
    rows, rhs, labels = [], [], []
    for con in cons:
        if isinstance(con, str):
            con = ShapeConstraint.parse(con)
        kind = con.kind
        if kind in (ShapeKind.INCREASING, ShapeKind.DECREASING):
            if basis.degree < 1:
                raise SplineSpecError("monotone constraints need degree >= 1")
            C = np.eye(dim)[:-1] - np.eye(dim, k=1)[:-1]
            if kind is ShapeKind.DECREASING:
                C = -C
            tag = kind.value
        else:
            if basis.degree < 2:
                raise SplineSpecError(f"{kind.value} constraints need degree >= 2")
            D2, _, _ = basis.derivative_matrix(2)
            D2 = _normalized(D2)
            if kind is ShapeKind.CONCAVE:
                C = D2
                tag = "concave"
            elif kind is ShapeKind.CONVEX:
                C = -D2
                tag = "convex"
            else:
                # f'' coefficients touching the boundary segment
                nb = basis.degree - 1
                sel = D2[-nb:] if con.side == "right" else D2[:nb]
                C = np.vstack([sel, -sel])
                tag = f"linear_tail_{con.side}"
        rows.append(C)
        rhs.append(np.zeros(C.shape[0]))
        labels += [f"{tag}[{i}]" for i in range(C.shape[0])]
    if not rows:
        return LinearConstraintSet(np.zeros((0, dim)), np.zeros(0))
    return LinearConstraintSet(np.vstack(rows), np.concatenate(rhs), tuple(labels))


def value_equality(basis: SplineBasis, t: float, value: float) -> LinearConstraintSet:
    """Pin ``f(t) = value`` as a pair of opposite inequalities."""
    x = basis_eval(basis, t)
    return LinearConstraintSet(np.vstack([x, -x]), np.array([value, -value]),
                               (f"f({t})<={value}", f"f({t})>={value}"))


def highest_derivative_prior(basis: SplineBasis, sd: float) -> GaussianPrior:
    """Zero-mean Gaussian prior on the piecewise-constant top derivative, one row per segment."""
    D, _, _ = basis.derivative_matrix(basis.degree)
    return GaussianPrior(D, np.zeros(D.shape[0]), np.full(D.shape[0], float(sd)))
