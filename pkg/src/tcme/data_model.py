"""Datasets, parameters, priors, constraints and model specifications.

Flattened parameter ordering used everywhere a constraint matrix or a
gradient refers to ``theta`` is ``[beta; gamma; sigma]``.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SIGMA_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed or invalid input data."""


class SchemaError(DataError):
    pass


class ValidationError(DataError):
    pass


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Group:
    """Observations of one group (study / subject).

    ``Z`` holds the random-effect loadings, ``covariates`` the raw columns an
    observation model may consume, and ``se`` the optional per-row standard
    deviations (same units as ``y``).
    """

    id: str
    y: np.ndarray
    Z: np.ndarray
    covariates: np.ndarray
    se: np.ndarray | None = None

    def __post_init__(self):
        y = _frozen(self.y).reshape(-1)
        n = y.size
        if n < 1:
            raise ValidationError(f"group {self.id!r} has no observations")
        Z = _frozen(self.Z)
        if Z.ndim == 1:
            Z = _frozen(Z.reshape(n, -1))
        cov = _frozen(self.covariates)
        if cov.ndim == 1:
            cov = _frozen(cov.reshape(n, -1))
        if Z.shape[0] != n or cov.shape[0] != n:
            raise ValidationError(f"group {self.id!r}: inconsistent row counts")
        se = None
        if self.se is not None:
            se = _frozen(self.se).reshape(-1)
            if se.size != n:
                raise ValidationError(f"group {self.id!r}: se length {se.size} != {n}")
            bad = np.flatnonzero(~(se > 0))
            if bad.size:
                raise ValidationError(
                    f"group {self.id!r}: se must be strictly positive (row {bad[0]})")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "se", se)

    @property
    def n(self) -> int:
        return self.y.size


class MEDataset:
    """Ordered collection of groups with concatenated views.

    Observation ``j`` of the flattened arrays maps to ``locate(j)`` =
    (group id, row within group); this order is the order of trimming
    weights.
    """

    def __init__(self, groups: Sequence[Group], covariate_names: Sequence[str] = ()):
        groups = tuple(groups)
        if not groups:
            raise ValidationError("no observations")
        ids = [g.id for g in groups]
        if len(set(ids)) != len(ids):
            raise ValidationError("group identifiers must be unique")
        k_gamma = groups[0].Z.shape[1]
        n_cov = groups[0].covariates.shape[1]
        for g in groups:
            if g.Z.shape[1] != k_gamma:
                raise ValidationError(
                    f"group {g.id!r}: Z has {g.Z.shape[1]} columns, expected {k_gamma}")
            if g.covariates.shape[1] != n_cov:
                raise ValidationError(f"group {g.id!r}: covariate column count mismatch")
        if covariate_names and len(covariate_names) != n_cov:
            raise ValidationError("covariate_names does not match covariate columns")
        has_se = [g.se is not None for g in groups]

        self.groups = groups
        self.covariate_names = tuple(covariate_names) or tuple(f"x{j}" for j in range(n_cov))
        self.k_gamma = k_gamma
        self.sizes = np.array([g.n for g in groups])
        self.n_total = int(self.sizes.sum())
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        self.group_index = np.repeat(np.arange(len(groups)), self.sizes)
        self.y = _frozen(np.concatenate([g.y for g in groups]))
        self.Z = _frozen(np.vstack([g.Z for g in groups]))
        self.covariates = _frozen(np.vstack([g.covariates for g in groups]))
        self.se = _frozen(np.concatenate([g.se for g in groups])) if all(has_se) else None
        for a in (self.sizes, self.offsets, self.group_index):
            a.setflags(write=False)

    @property
    def m(self) -> int:
        return len(self.groups)

    @property
    def ids(self) -> list[str]:
        return [g.id for g in self.groups]

    def locate(self, j: int) -> tuple[str, int]:
        i = int(self.group_index[j])
        return self.groups[i].id, int(j - self.offsets[i])

    def group_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i] + self.sizes[i]))

    def covariate(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown covariate column {name!r}") from None
        return self.covariates[:, j]

    def replace(self, *, y=None, Z=None, se=None) -> "MEDataset":
        """Copy with any of the concatenated y, Z or se arrays substituted."""
        y = self.y if y is None else np.asarray(y, float)
        Z = self.Z if Z is None else np.asarray(Z, float).reshape(self.n_total, -1)
        se = self.se if se is None else np.asarray(se, float)
        groups = []
        for i, g in enumerate(self.groups):
            s = self.group_slice(i)
            groups.append(Group(g.id, y[s], Z[s], g.covariates,
                                None if se is None else se[s]))
        return MEDataset(groups, self.covariate_names)

    def drop(self, j: int) -> "MEDataset":
        """Copy with flat observation ``j`` removed; a group left empty is dropped."""
        gi = int(self.group_index[j])
        row = j - int(self.offsets[gi])
        groups = []
        for i, g in enumerate(self.groups):
            if i != gi:
                groups.append(g)
                continue
            if g.n == 1:
                continue
            keep = np.arange(g.n) != row
            groups.append(Group(g.id, g.y[keep], g.Z[keep], g.covariates[keep],
                                None if g.se is None else g.se[keep]))
        return MEDataset(groups, self.covariate_names)

    def __eq__(self, other):
        if not isinstance(other, MEDataset):
            return NotImplemented
        if self.ids != other.ids or self.covariate_names != other.covariate_names:
            return False
        if (self.se is None) != (other.se is None):
            return False
        same = (np.array_equal(self.y, other.y) and np.array_equal(self.Z, other.Z)
                and np.array_equal(self.covariates, other.covariates))
        return same and (self.se is None or np.array_equal(self.se, other.se))

    __hash__ = None


class ErrorKind(enum.Enum):
    KNOWN = "known"
    SHARED = "shared"
    GROUP = "group"


@dataclass(frozen=True)
class ErrorSpec:
    """Measurement-error structure.

    KNOWN uses the dataset's ``se`` (meta-analysis), SHARED a single unknown
    sigma, GROUP one unknown sigma per group.
    """

    kind: ErrorKind = ErrorKind.KNOWN

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", ErrorKind(self.kind.lower()))

    def k_sigma(self, m: int) -> int:
        return {ErrorKind.KNOWN: 0, ErrorKind.SHARED: 1, ErrorKind.GROUP: m}[self.kind]


@dataclass(frozen=True)
class Theta:
    """Fixed parameters: fixed effects, random-effect variances, error SDs."""

    beta: np.ndarray
    gamma: np.ndarray
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("beta", "gamma", "sigma"):
            object.__setattr__(self, name, _frozen(np.atleast_1d(getattr(self, name))).reshape(-1))

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.beta.size, self.gamma.size, self.sigma.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma, self.sigma])

    @classmethod
    def from_flat(cls, x, k_beta: int, k_gamma: int, k_sigma: int) -> "Theta":
        x = np.asarray(x, float)
        if x.size != k_beta + k_gamma + k_sigma:
            raise ValueError("flat theta has the wrong length")
        return cls(x[:k_beta], x[k_beta:k_beta + k_gamma], x[k_beta + k_gamma:])

    def check(self, sigma_floor: float = SIGMA_FLOOR) -> None:
        if np.any(self.gamma < 0):
            raise ValidationError("gamma entries must be >= 0")
        if np.any(self.sigma < sigma_floor):
            raise ValidationError(f"sigma entries must be >= {sigma_floor}")


@dataclass(frozen=True)
class LinearConstraintSet:
    """Rows of ``C @ theta <= c`` on the flattened parameter vector."""

    C: np.ndarray
    c: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, float))
        c = np.asarray(self.c, float).reshape(-1)
        if C.size == 0:
            C = C.reshape(0, C.shape[-1] if C.ndim == 2 else 0)
        if C.shape[0] != c.size:
            raise ValidationError(f"C has {C.shape[0]} rows but c has {c.size} entries")
        labels = tuple(self.labels) or tuple(f"row{i}" for i in range(c.size))
        if len(labels) != c.size:
            raise ValidationError("one label per constraint row required")
        object.__setattr__(self, "C", _frozen(C))
        object.__setattr__(self, "c", _frozen(c))
        object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return self.c.size

    @property
    def n_cols(self) -> int:
        return self.C.shape[1]

    def pad_to_theta(self, k_gamma: int, k_sigma: int) -> "LinearConstraintSet":
        """Embed a beta-only constraint set into the full ``[beta; gamma; sigma]`` space."""
        pad = np.zeros((self.n_rows, k_gamma + k_sigma))
        return LinearConstraintSet(np.hstack([self.C, pad]), self.c, self.labels)

    @staticmethod
    def stack(sets: Sequence["LinearConstraintSet"]) -> "LinearConstraintSet | None":
        sets = [s for s in sets if s is not None and s.n_rows]
        if not sets:
            return None
        cols = {s.n_cols for s in sets}
        if len(cols) != 1:
            raise ValidationError("cannot stack constraint sets of different widths")
        return LinearConstraintSet(np.vstack([s.C for s in sets]),
                                   np.concatenate([s.c for s in sets]),
                                   sum((s.labels for s in sets), ()))


@dataclass(frozen=True)
class NonlinearConstraint:
    """``evaluator(theta_flat) <= upper`` with Jacobian ``jacobian(theta_flat)``."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "upper", _frozen(np.atleast_1d(self.upper)))

    def check_dims(self, x: np.ndarray) -> None:
        v = np.atleast_1d(self.evaluator(x))
        J = np.atleast_2d(self.jacobian(x))
        if v.size != self.upper.size or J.shape != (v.size, x.size):
            raise ValidationError("nonlinear constraint dimensions are inconsistent")


@dataclass(frozen=True)
class GaussianPrior:
    """Penalty ``0.5 * sum(((A @ beta - mean) / sd) ** 2)``."""

    A: np.ndarray
    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        A = _frozen(np.atleast_2d(self.A))
        r = A.shape[0]
        mean = _frozen(np.broadcast_to(np.asarray(self.mean, float), (r,)))
        sd = _frozen(np.broadcast_to(np.asarray(self.sd, float), (r,)))
        if np.any(~(sd > 0)):
            raise ValidationError("prior sd must be strictly positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)

    def penalty(self, beta: np.ndarray) -> tuple[float, np.ndarray]:
        z = (self.A @ beta - self.mean) / self.sd
        return 0.5 * float(z @ z), self.A.T @ (z / self.sd)


@dataclass(frozen=True)
class TrimWeights:
    w: np.ndarray
    h: float

    def __post_init__(self):
        w = _frozen(self.w).reshape(-1)
        if np.any(w < 0) or np.any(w > 1):
            raise ValidationError("trimming weights must lie in [0, 1]")
        if abs(w.sum() - self.h) > 1e-8:
            raise ValidationError(f"weights sum to {w.sum()}, expected h={self.h}")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, n: int, h: float) -> "TrimWeights":
        return cls(np.full(n, h / n), h)


def trim_budget(inlier_fraction: float, n_total: int) -> int:
    """Number of retained observations for a given inlier fraction."""
    if not 0 < inlier_fraction <= 1:
        raise ValidationError("inlier_fraction must be in (0,1]")
    h = int(round(inlier_fraction * n_total))
    return min(max(h, 1), n_total)


@dataclass(frozen=True)
class Bounds:
    """Box bounds per parameter block; ``None`` means the default."""

    beta_lb: np.ndarray | float | None = None
    beta_ub: np.ndarray | float | None = None
    gamma_lb: np.ndarray | float | None = None
    gamma_ub: np.ndarray | float | None = None
    sigma_lb: np.ndarray | float | None = None
    sigma_ub: np.ndarray | float | None = None

    def arrays(self, k_beta: int, k_gamma: int, k_sigma: int,
               sigma_floor: float = SIGMA_FLOOR) -> tuple[np.ndarray, np.ndarray]:
        def fill(v, k, default):
            return np.broadcast_to(np.asarray(default if v is None else v, float), (k,)).copy()

        lb = np.concatenate([fill(self.beta_lb, k_beta, -np.inf),
                             fill(self.gamma_lb, k_gamma, 0.0),
                             fill(self.sigma_lb, k_sigma, sigma_floor)])
        ub = np.concatenate([fill(self.beta_ub, k_beta, np.inf),
                             fill(self.gamma_ub, k_gamma, np.inf),
                             fill(self.sigma_ub, k_sigma, np.inf)])
        lb[k_beta:k_beta + k_gamma] = np.maximum(lb[k_beta:k_beta + k_gamma], 0.0)
        lb[k_beta + k_gamma:] = np.maximum(lb[k_beta + k_gamma:], sigma_floor)
        return lb, ub


@dataclass(frozen=True)
class SolverOptions:
    kkt_tol: float = 1e-6
    max_iter: int = 500
    mu0: float = 1.0
    mu_min: float = 1e-9
    mu_factor: float = 0.1
    warm_mu0: float = 1e-3
    w_tol: float = 1e-6
    max_outer: int = 300
    armijo: float = 1e-4
    min_step: float = 1e-12
    restarts: int = 3


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to fit a dataset besides the data itself.

    ``obs_model`` is any object from :mod:`tcme.obs_models`. ``constraints``
    act on the flattened ``[beta; gamma; sigma]`` vector. ``var_reference``
    controls the variance unit of the weight interpolation (see
    :func:`tcme.likelihood.trimmed_neg_loglik`); ``"auto"`` lets the fit pick it.
    ``n_inliers``, when set, overrides ``inlier_fraction``.
    """

    obs_model: object
    error: ErrorSpec = ErrorSpec()
    inlier_fraction: float = 1.0
    constraints: LinearConstraintSet | None = None
    nonlinear_constraints: tuple[NonlinearConstraint, ...] = ()
    priors: tuple[GaussianPrior, ...] = ()
    bounds: Bounds = Bounds()
    solver: SolverOptions = SolverOptions()
    theta0: Theta | None = None
    sigma_floor: float = SIGMA_FLOOR
    var_reference: float | str = "auto"
    n_inliers: int | None = None

    @property
    def k_beta(self) -> int:
        return self.obs_model.k_beta

    def sizes(self, data: MEDataset) -> tuple[int, int, int]:
        return self.k_beta, data.k_gamma, self.error.k_sigma(data.m)

    def k_theta(self, data: MEDataset) -> int:
        return sum(self.sizes(data))

    def h(self, data: MEDataset) -> int:
        if self.n_inliers is not None:
            problems = check_trim_budget(self.n_inliers, data.n_total)
            if problems:
                raise ValidationError(problems[0])
            return int(self.n_inliers)
        return trim_budget(self.inlier_fraction, data.n_total)

    def with_(self, **changes) -> "ModelSpec":
        from dataclasses import replace
        return replace(self, **changes)


def variances(theta: Theta, data: MEDataset, error: ErrorSpec) -> np.ndarray:
    """Per-observation measurement variances (diagonal of Lambda)."""
    if error.kind is ErrorKind.KNOWN:
        if data.se is None:
            raise ValidationError("known measurement error requires se on every group")
        return data.se ** 2
    if error.kind is ErrorKind.SHARED:
        return np.full(data.n_total, theta.sigma[0] ** 2)
    return theta.sigma[data.group_index] ** 2


@dataclass(frozen=True)
class Schema:
    """CSV column mapping.

    Columns not named here become covariates, except ``re_*`` columns which
    hold random-effect loadings (written by :func:`save_dataset`). With no
    ``re_*`` columns and ``random_effects`` unset, Z is a column of ones.
    ``random_effects`` may name covariates or ``"intercept"``.
    """

    group: str = "group"
    y: str = "y"
    se: str | None = "se"
    covariates: tuple[str, ...] | None = None
    random_effects: tuple[str, ...] | None = None


def load_dataset(csv_path, schema: Schema = Schema()) -> MEDataset:
    path = Path(csv_path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError("no observations")
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"parse error: row {lineno} has {len(row)} fields, "
                                f"expected {len(header)}")
            rows.append(row)
    if not rows:
        raise ValidationError("no observations")

    for col in (schema.group, schema.y):
        if col not in header:
            raise SchemaError(f"missing column {col!r}")
    se_col = schema.se if schema.se in header else None
    if schema.se is not None and se_col is None and schema.se != "se":
        raise SchemaError(f"missing column {schema.se!r}")
    re_cols = [h for h in header if h.startswith("re_")]
    reserved = {schema.group, schema.y, se_col, *re_cols}
    if schema.covariates is None:
        cov_names = [h for h in header if h not in reserved]
    else:
        cov_names = list(schema.covariates)
        for col in cov_names:
            if col not in header:
                raise SchemaError(f"missing column {col!r}")

    idx = {h: j for j, h in enumerate(header)}

    def num(row, col, lineno):
        try:
            return float(row[idx[col]])
        except ValueError:
            raise DataError(f"parse error: row {lineno}, column {col!r}: "
                            f"{row[idx[col]]!r} is not a number") from None

    order: dict[str, list[int]] = {}
    for r, row in enumerate(rows):
        order.setdefault(row[idx[schema.group]].strip(), []).append(r)

    y = np.array([num(row, schema.y, r + 1) for r, row in enumerate(rows)])
    cov = np.array([[num(row, c, r + 1) for c in cov_names] for r, row in enumerate(rows)])
    cov = cov.reshape(len(rows), len(cov_names))
    se = None
    if se_col is not None:
        se = np.array([num(row, se_col, r + 1) for r, row in enumerate(rows)])
        bad = np.flatnonzero(~(se > 0))
        if bad.size:
            raise ValidationError(f"se must be strictly positive: row {bad[0] + 1}")
    if schema.random_effects is not None:
        cols = []
        for name in schema.random_effects:
            if name == "intercept":
                cols.append(np.ones(len(rows)))
            elif name in cov_names:
                cols.append(cov[:, cov_names.index(name)])
            else:
                raise SchemaError(f"unknown random-effect column {name!r}")
        Z = np.column_stack(cols)
    elif re_cols:
        Z = np.array([[num(row, c, r + 1) for c in re_cols] for r, row in enumerate(rows)])
    else:
        Z = np.ones((len(rows), 1))

    groups = []
    for gid, members in order.items():
        members = np.array(members)
        groups.append(Group(gid, y[members], Z[members], cov[members],
                            None if se is None else se[members]))
    return MEDataset(groups, cov_names)


def save_dataset(data: MEDataset, csv_path) -> None:
    """Write a dataset so that :func:`load_dataset` reproduces it exactly."""
    header = ["group", "y"] + (["se"] if data.se is not None else [])
    header += list(data.covariate_names) + [f"re_{j}" for j in range(data.k_gamma)]
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for j in range(data.n_total):
            gid, _ = data.locate(j)
            row = [gid, repr(float(data.y[j]))]
            if data.se is not None:
                row.append(repr(float(data.se[j])))
            row += [repr(float(v)) for v in data.covariates[j]]
            row += [repr(float(v)) for v in data.Z[j]]
            writer.writerow(row)


def validate_spec(data: MEDataset, spec: ModelSpec) -> list[str]:
    """Report every dimension/consistency problem; never raises."""
    out: list[str] = []
    try:
        kb = spec.k_beta
    except Exception as exc:  # noqa: BLE001 - report, don't raise
        return [f"observation model unusable: {exc}"]
    kg, m = data.k_gamma, data.m
    ks = spec.error.k_sigma(m)
    k = kb + kg + ks

    n_rows = getattr(spec.obs_model, "n_rows", None)
    if n_rows is not None and n_rows != data.n_total:
        out.append(f"observation model has {n_rows} rows, dataset has {data.n_total}")

    if spec.error.kind is ErrorKind.KNOWN:
        for g in data.groups:
            if g.se is None:
                out.append(f"known measurement error but group {g.id!r} has no se")

    if spec.n_inliers is not None:
        out += check_trim_budget(spec.n_inliers, data.n_total)
    elif not 0 < spec.inlier_fraction <= 1:
        out.append("inlier_fraction must be in (0,1]")
    if spec.constraints is not None and spec.constraints.n_cols not in (kb, k):
        out.append(f"constraint matrix has {spec.constraints.n_cols} columns, "
                   f"expected {k} ([beta; gamma; sigma]) or {kb} (beta only)")
    for i, p in enumerate(spec.priors):
        if p.A.shape[1] != kb:
            out.append(f"prior {i} maps {p.A.shape[1]} coefficients, expected {kb}")
    for i, nc in enumerate(spec.nonlinear_constraints):
        try:
            nc.check_dims(np.ones(k))
        except Exception as exc:  # noqa: BLE001
            out.append(f"nonlinear constraint {i}: {exc}")
    if spec.theta0 is not None and spec.theta0.sizes != (kb, kg, ks):
        out.append(f"theta0 sizes {spec.theta0.sizes} != {(kb, kg, ks)}")
    try:
        lb, ub = spec.bounds.arrays(kb, kg, ks, spec.sigma_floor)
        if np.any(lb > ub):
            out.append("lower bound exceeds upper bound")
    except ValueError as exc:
        out.append(f"bounds: {exc}")
    return out


def check_trim_budget(h: float, n_total: int) -> list[str]:
    if h > n_total:
        return ["trim budget exceeds data"]
    if h < 1:
        return ["trim budget below one observation"]
    return []
