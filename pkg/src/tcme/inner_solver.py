"""Constrained minimization of the trimmed likelihood over theta.

A primal log-barrier interior point method: for a decreasing sequence of
barrier weights ``mu`` it minimizes

    phi(x) = f(x) - mu * sum(log(-g_i(x)))

over the strict interior of ``g(x) <= 0`` with Newton-like steps
``(B + sum(mu / s_i^2) a_i a_i') d = -grad phi``, where ``B`` is a damped BFGS
approximation of the Hessian of ``f`` (started from finite differences of the
gradient) and the barrier curvature is exact for linear rows.

Equality structure that a barrier cannot represent (fixed bounds ``lb == ub``
and pairs of opposite linear rows) is removed by parameterizing
``x = x_base + N z`` with ``N`` an orthonormal null-space basis.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data_model import (LinearConstraintSet, MEDataset, ModelSpec, NonlinearConstraint,
                         SolverOptions, Theta)
from .likelihood import InvalidVarianceError, trimmed_neg_loglik
from .obs_models import DomainError, evaluate

TAU = 0.995          # fraction to the boundary
ARMIJO = 1e-4
CURVATURE_MAX = 1e6  # objectives curving more than this at the start are scaled down


class SolveStatus(enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


class NumericError(FloatingPointError):
    """The objective returned NaN/Inf at an accepted iterate."""

    def __init__(self, message: str, iterate=None):
        super().__init__(message)
        self.iterate = None if iterate is None else np.array(iterate, float)


@dataclass
class SolveReport:
    theta_star: object
    objective: float
    kkt_residual: float
    active_set: list
    multipliers: np.ndarray
    iterations: int
    status: SolveStatus
    stationarity: float = np.nan
    feasibility: float = np.nan
    complementarity: float = np.nan
    gradient: np.ndarray | None = None
    merit_history: list = field(default_factory=list, repr=False)
    hessian: np.ndarray | None = field(default=None, repr=False)
    objective_scale: float = 1.0

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED

    @property
    def x(self) -> np.ndarray:
        t = self.theta_star
        return t.flat() if isinstance(t, Theta) else np.asarray(t, float)


_SOFT_ERRORS = (DomainError, InvalidVarianceError, FloatingPointError,
                np.linalg.LinAlgError, ZeroDivisionError, OverflowError)


def _safe(fun, x):
    """Value and gradient, or ``(inf, None)`` outside the objective's domain."""
    try:
        with np.errstate(all="ignore"):
            v, g = fun(x)
    except _SOFT_ERRORS:
        return np.inf, None
    v = float(v)
    if not np.isfinite(v):
        return np.inf, None
    return v, np.asarray(g, float)


class _Reduced:
    """Inequalities ``g(z) <= 0`` in the null-space coordinates ``z``."""

    def __init__(self, n, lb, ub, lin: LinearConstraintSet | None,
                 nonlin: Sequence[NonlinearConstraint], x0):
        self.n = n
        self.lb, self.ub = lb, ub
        self.C = np.zeros((0, n)) if lin is None else lin.C
        self.c = np.zeros(0) if lin is None else lin.c
        self.nonlin = list(nonlin)
        q = self.c.size
        self.n_nl = [nl.upper.size for nl in self.nonlin]
        self.n_mult = q + sum(self.n_nl) + 2 * n

        fixed = np.isfinite(lb) & (lb == ub)
        self.fixed = fixed
        # opposite row pairs become equalities
        paired = np.full(q, -1)
        for i in range(q):
            if paired[i] >= 0:
                continue
            scale = 1.0 + np.abs(self.C[i]).max()
            for j in range(i + 1, q):
                if paired[j] < 0 and np.abs(self.C[i] + self.C[j]).max() <= 1e-12 * scale \
                        and abs(self.c[i] + self.c[j]) <= 1e-12 * (1 + abs(self.c[i])):
                    paired[i], paired[j] = j, i
                    break
        self.paired = paired
        self.eq_rows = [i for i in range(q) if paired[i] > i]
        E = [np.eye(n)[j] for j in np.flatnonzero(fixed)] + [self.C[i] for i in self.eq_rows]
        e = [lb[j] for j in np.flatnonzero(fixed)] + [self.c[i] for i in self.eq_rows]
        self.E = np.array(E).reshape(-1, n)
        self.e = np.array(e, float)
        self.feasible_eq = True
        if self.E.shape[0]:
            xb = x0 - np.linalg.lstsq(self.E, self.E @ x0 - self.e, rcond=None)[0]
            xb[fixed] = lb[fixed]
            if np.abs(self.E @ xb - self.e).max() > 1e-9 * (1 + np.abs(self.e).max()):
                self.feasible_eq = False
            _, sv, Vt = np.linalg.svd(self.E)
            rank = int(np.sum(sv > 1e-10 * max(sv.max(), 1.0)))
            N = Vt[rank:].T
            N[fixed] = 0.0
            self.N, self.xb = N, xb
        else:
            self.N, self.xb = np.eye(n), np.zeros(n)
        self.p = self.N.shape[1]

        # linear inequality rows in z: A z <= b, with their multiplier slot
        rows, rhs, ids = [], [], []
        for i in range(q):
            if paired[i] < 0:
                rows.append(self.C[i] @ self.N)
                rhs.append(self.c[i] - self.C[i] @ self.xb)
                ids.append(i)
        off = q + sum(self.n_nl)
        for j in range(n):
            if fixed[j]:
                continue
            if np.isfinite(lb[j]):
                rows.append(-self.N[j])
                rhs.append(self.xb[j] - lb[j])
                ids.append(off + j)
            if np.isfinite(ub[j]):
                rows.append(self.N[j])
                rhs.append(ub[j] - self.xb[j])
                ids.append(off + n + j)
        A = np.array(rows).reshape(-1, self.p)
        b = np.array(rhs, float)
        keep = np.abs(A).max(axis=1, initial=0.0) > 1e-14 if A.size else np.zeros(len(ids), bool)
        if np.any(~keep & (b < -1e-12)):
            self.feasible_eq = False
        self.A, self.b = A[keep], b[keep]
        self.lin_ids = np.array(ids, int)[keep]
        self.nl_ids = [q + sum(self.n_nl[:k]) + np.arange(self.n_nl[k])
                       for k in range(len(self.nonlin))]

    def x(self, z):
        return self.xb + self.N @ z

    def z(self, x):
        return self.N.T @ (x - self.xb)

    @property
    def n_rows(self):
        return self.b.size + sum(self.n_nl)

    def cons(self, z):
        """``(g, G)`` with ``g <= 0`` feasible; ``None`` if a nonlinear row fails."""
        g = [self.A @ z - self.b]
        G = [self.A]
        if self.nonlin:
            x = self.x(z)
            for nl in self.nonlin:
                try:
                    v = np.atleast_1d(np.asarray(nl.evaluator(x), float))
                    J = np.atleast_2d(np.asarray(nl.jacobian(x), float))
                except _SOFT_ERRORS:
                    return None
                g.append(v - nl.upper)
                G.append(J @ self.N)
        return np.concatenate(g), np.vstack(G)

    def slot_ids(self):
        return np.concatenate([self.lin_ids] + self.nl_ids) if self.nl_ids else self.lin_ids

    def x_rows(self, x):
        """All rows in multiplier order as ``(g, grad)`` in x-space."""
        n = self.n
        g = [self.C @ x - self.c]
        G = [self.C]
        for nl in self.nonlin:
            g.append(np.atleast_1d(nl.evaluator(x)) - nl.upper)
            G.append(np.atleast_2d(nl.jacobian(x)))
        with np.errstate(invalid="ignore"):
            g += [np.where(np.isfinite(self.lb), self.lb - x, -np.inf),
                  np.where(np.isfinite(self.ub), x - self.ub, -np.inf)]
        G += [-np.eye(n), np.eye(n)]
        return np.concatenate(g), np.vstack(G)


def _fd_hessian(fz, z, g0, floor=1e-10):
    """Forward-difference Hessian of ``fz``, symmetrized and made positive definite."""
    p = z.size
    H = np.zeros((p, p))
    for j in range(p):
        h = 1e-6 * max(1.0, abs(z[j]))
        for step in (h, -h):
            zp = z.copy()
            zp[j] += step
            _, gp = fz(zp)
            if gp is not None:
                H[:, j] = (gp - g0) / step
                break
        else:
            H[j, j] = 1.0
    H = 0.5 * (H + H.T)
    lam, V = np.linalg.eigh(H)
    lam = np.abs(lam)
    lam = np.maximum(lam, max(floor, 1e-8 * lam.max(initial=0.0)))
    return (V * lam) @ V.T


def _newton_dir(H, rhs):
    try:
        L = np.linalg.cholesky(H)
        return np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    except np.linalg.LinAlgError:
        ridge = 1e-10 * max(1.0, np.abs(np.diag(H)).max())
        return np.linalg.solve(H + ridge * np.eye(H.shape[0]), rhs)


@dataclass
class _State:
    z: np.ndarray
    f: float
    gf: np.ndarray
    g: np.ndarray
    G: np.ndarray
    lam: np.ndarray | None = None


KAPPA = 1e10         # multipliers are kept within [mu / (KAPPA s), KAPPA mu / s]


def _barrier(fz, red, st: _State, B, mus, opts: SolverOptions, max_iter,
             stop=None, quasi_newton=True):
    """Run the barrier schedule from a strictly feasible state.

    Primal-dual steps: the multipliers ``lam`` are carried separately from
    ``mu / s`` so that after a reduction of ``mu`` the barrier curvature is
    ``lam / s`` rather than ``mu / s^2``, which avoids the slow re-centering
    of a purely primal method. Steps are accepted by an Armijo test on the
    primal barrier function, for which the direction is always a descent
    direction.
    """
    it = 0
    history = []
    mu = mus[0]
    hit_max = False
    if st.lam is None:
        st.lam = mu / -st.g
    for mu in mus:
        stage = []
        reset = False
        tol = max(opts.kkt_tol, 10 * mu)
        while True:
            s = -st.g
            lam = np.clip(st.lam, mu / (KAPPA * s), KAPPA * mu / s)
            gphi = st.gf + st.G.T @ (mu / s)
            phi = st.f - mu * np.sum(np.log(s))
            stage.append(phi)
            stat = np.abs(st.gf + st.G.T @ lam).max(initial=0.0)
            comp = np.abs(s * lam - mu).max(initial=0.0)
            if (stat <= tol and comp <= 10 * mu) or st.z.size == 0:
                break
            if it >= max_iter:
                hit_max = True
                break
            H = B + (st.G.T * (lam / s)) @ st.G
            d = _newton_dir(H, -gphi)
            slope = float(gphi @ d)
            if not slope < 0:
                d = -gphi / max(1.0, np.abs(np.diag(H)).max())
                slope = float(gphi @ d)
            Gd = st.G @ d
            grow = Gd > 0
            alpha = min(1.0, float(np.min(TAU * s[grow] / Gd[grow]))) if np.any(grow) else 1.0
            dlam = mu / s - lam + (lam / s) * Gd
            shrink = dlam < 0
            alpha_d = min(1.0, float(np.min(-TAU * lam[shrink] / dlam[shrink]))) \
                if np.any(shrink) else 1.0
            accepted = None
            gnorm = np.abs(gphi).max(initial=0.0)
            for _ in range(60):
                zn = st.z + alpha * d
                cn = red.cons(zn)
                if cn is not None and np.all(cn[0] < 0):
                    fn, gfn = fz(zn)
                    if np.isfinite(fn):
                        phin = fn - mu * np.sum(np.log(-cn[0]))
                        if phin <= phi + ARMIJO * alpha * slope:
                            accepted = (zn, fn, gfn, cn)
                            break
                        # at the rounding floor of phi accept a gradient decrease
                        if phin - phi <= 1e-14 * (1 + abs(phi)):
                            gn = gfn + cn[1].T @ (mu / -cn[0])
                            if np.abs(gn).max() < 0.5 * gnorm:
                                accepted = (zn, fn, gfn, cn)
                                break
                alpha *= 0.5
            if accepted is None:
                if quasi_newton and not reset:
                    B = _fd_hessian(fz, st.z, st.gf)
                    reset = True
                    continue
                break
            reset = False
            zn, fn, gfn, (gn, Gn) = accepted
            if not np.all(np.isfinite(gfn)):
                raise NumericError("non-finite gradient", red.x(zn))
            lam_n = lam + alpha_d * dlam
            if quasi_newton:
                # Lagrangian gradients so curved rows enter B (linear rows cancel)
                sv = zn - st.z
                yv = gfn - st.gf + (Gn - st.G).T @ lam_n
                Bs = B @ sv
                sBs = float(sv @ Bs)
                sy = float(sv @ yv)
                if sBs > 0:
                    if sy < 0.2 * sBs:
                        t = 0.8 * sBs / (sBs - sy)
                        yv = t * yv + (1 - t) * Bs
                        sy = float(sv @ yv)
                    if sy > 0:
                        B = B - np.outer(Bs, Bs) / sBs + np.outer(yv, yv) / sy
            st = _State(zn, fn, gfn, gn, Gn, lam_n)
            it += 1
            if stop is not None and stop(st):
                history.append(stage)
                return st, B, mu, it, history, False
        history.append(stage)
        if hit_max:
            break
    return st, B, mu, it, history, hit_max


def _phase1(red: _Reduced, z0, opts: SolverOptions):
    """Find z with all rows strictly satisfied, or ``None``."""
    cons = red.cons(z0)
    if cons is None:
        return None
    t0 = float(cons[0].max()) + 1.0
    p = red.p

    class _Aug:
        b = None

        def cons(self, zt):
            c = red.cons(zt[:p])
            if c is None:
                return None
            g, G = c
            g = np.concatenate([g - zt[p], [-zt[p] - 1.0]])
            G = np.vstack([np.hstack([G, -np.ones((G.shape[0], 1))]),
                           np.concatenate([np.zeros(p), [-1.0]])])
            return g, G

    aug = _Aug()

    def obj(zt):
        e = np.zeros(p + 1)
        e[p] = 1.0
        return float(zt[p]), e

    zt = np.concatenate([z0, [t0]])
    g, G = aug.cons(zt)
    st = _State(zt, t0, obj(zt)[1], g, G)
    mus = [10.0 ** k for k in range(0, -10, -1)]

    def done(s):
        return s.z[p] < -1e-4

    st, *_ = _barrier(obj, aug, st, 1e-8 * np.eye(p + 1), mus, opts, 10 * opts.max_iter,
                      stop=done, quasi_newton=False)
    z = st.z[:p]
    c = red.cons(z)
    if c is None or not np.all(c[0] < 0):
        return None
    return z


def _push_inside(x, lb, ub, frac):
    """Move ``x`` at least ``frac * (range or max(1, |bound|))`` inside finite bounds."""
    x = np.array(x, float)
    free = ~(np.isfinite(lb) & (lb == ub))
    rng = np.where(np.isfinite(ub - lb), ub - lb, np.inf)
    dl = np.minimum(frac * np.maximum(1.0, np.abs(lb)), 0.25 * rng)
    du = np.minimum(frac * np.maximum(1.0, np.abs(ub)), 0.25 * rng)
    with np.errstate(invalid="ignore"):
        lo = np.where(np.isfinite(lb), lb + dl, -np.inf)
        hi = np.where(np.isfinite(ub), ub - du, np.inf)
    x[free] = np.clip(x[free], lo[free], hi[free])
    return x


def minimize_constrained(objective: Callable, bounds, lin: LinearConstraintSet | None = None,
                         nonlin: Sequence[NonlinearConstraint] = (), theta0=None,
                         opts: SolverOptions = SolverOptions(), *, warm: bool = False,
                         hess0: np.ndarray | None = None, bound_push: float | None = None
                         ) -> SolveReport:
    """Minimize ``objective`` subject to bounds and inequality constraints.

    Parameters
    ----------
    objective : callable
        ``x -> (value, gradient)`` on the flat parameter vector. Domain errors
        and non-finite values are treated as +inf during line searches.
    bounds : (lb, ub)
        Box bounds; ``lb == ub`` fixes a coordinate.
    lin : LinearConstraintSet, optional
        Rows ``C x <= c``. A pair of rows ``(a, b)`` and ``(-a, -b)`` is treated
        as the equality ``a x = b``.
    nonlin : sequence of NonlinearConstraint
        Rows ``g(x) <= upper``.
    theta0 : Theta or array
        Starting point; the result has the same type.
    warm : bool
        Start the barrier schedule at ``opts.warm_mu0`` instead of ``opts.mu0``.
    hess0 : array, optional
        Initial quasi-Newton matrix in reduced coordinates (``report.hessian``
        of an earlier solve of the same problem).
    bound_push : float, optional
        Relative distance the start is moved inside finite bounds
        (default 1e-2 cold, 1e-3 warm).

    Returns
    -------
    SolveReport
        Multipliers are ordered as ``[linear rows, nonlinear rows, lower
        bounds, upper bounds]``.
    """
    is_theta = isinstance(theta0, Theta)
    x0 = theta0.flat() if is_theta else np.asarray(theta0, float).reshape(-1)
    n = x0.size
    lb, ub = (np.broadcast_to(np.asarray(b, float), (n,)).copy() for b in bounds)
    if lin is not None and lin.n_rows == 0:
        lin = None

    def wrap(x):
        return Theta.from_flat(x, *theta0.sizes) if is_theta else x

    if np.any(lb > ub):
        return _infeasible(wrap(x0), lb, ub, lin, nonlin)
    if bound_push is None:
        bound_push = 1e-3 if warm else 1e-2
    x0 = _push_inside(x0, lb, ub, 1e-6)
    x0 = _push_inside(x0, lb, ub, bound_push)
    red = _Reduced(n, lb, ub, lin, nonlin, x0)
    if not red.feasible_eq:
        return _infeasible(wrap(x0), lb, ub, lin, nonlin)

    scale = 1.0

    def fz(z):
        v, g = _safe(objective, red.x(z))
        return scale * v, (None if g is None else scale * (red.N.T @ g))

    z = red.z(x0)
    c = red.cons(z)
    if c is None or not np.all(c[0] < 0):
        z = _phase1(red, z, opts)
        if z is None:
            return _infeasible(wrap(x0), lb, ub, lin, nonlin)
        c = red.cons(z)
    f, gz = fz(z)
    if not np.isfinite(f):
        raise NumericError("objective is not finite at the starting point", red.x(z))

    if hess0 is not None and hess0.shape == (red.p, red.p):
        B = hess0.copy()
    else:
        B = _fd_hessian(fz, z, gz)
    # with very large curvature one ulp of x moves the gradient by more than
    # the tolerance; KKT residuals are then measured on a scaled objective
    curv = float(np.abs(np.diag(B)).max(initial=0.0))
    if curv > CURVATURE_MAX:
        scale = CURVATURE_MAX / curv
        f, gz, B = scale * f, scale * gz, scale * B
    mu0 = opts.warm_mu0 if warm else opts.mu0
    mus = []
    mu = mu0
    while mu >= opts.mu_min * (1 - 1e-9):
        mus.append(mu)
        mu *= opts.mu_factor
    if not mus:
        mus = [opts.mu_min]
    st = _State(z, f, gz, *c)
    st, B, mu, iters, history, hit_max = _barrier(fz, red, st, B, mus, opts, opts.max_iter)
    return _report(objective, red, st, B, mu, iters, history, wrap, opts, scale)


def _infeasible(theta, lb, ub, lin, nonlin):
    """Report for a problem without a strictly feasible point: the KKT residual
    is the largest constraint violation at the returned point."""
    x = theta.flat() if isinstance(theta, Theta) else np.asarray(theta, float)
    viol = [np.maximum(lb - x, 0.0), np.maximum(x - ub, 0.0)]
    if lin is not None:
        viol.append(lin.C @ x - lin.c)
    for nl in nonlin:
        viol.append(np.atleast_1d(nl.evaluator(x)) - nl.upper)
    feas = max(0.0, max(float(np.max(v, initial=0.0)) for v in viol))
    q = 0 if lin is None else lin.n_rows
    k = q + sum(nl.upper.size for nl in nonlin) + 2 * x.size
    return SolveReport(theta, np.nan, feas, [], np.zeros(k), 0, SolveStatus.INFEASIBLE,
                       feasibility=feas)


def _report(objective, red: _Reduced, st: _State, B, mu, iters, history, wrap, opts, scale=1.0):
    """KKT measures on the scaled objective; multipliers, gradient and Hessian unscaled."""
    x = red.x(st.z)
    if red.fixed.any():
        x[red.fixed] = red.lb[red.fixed]
    f, g_raw = _safe(objective, x)
    if g_raw is None or not np.all(np.isfinite(g_raw)):
        raise NumericError("objective is not finite at the final iterate", x)
    gx = scale * g_raw

    mult = np.zeros(red.n_mult)
    s = -st.g
    mult[red.slot_ids()] = np.clip(st.lam, mu / (KAPPA * s), KAPPA * mu / s)
    gall, Gall = red.x_rows(x)
    resid = gx + Gall.T @ mult
    # equality multipliers (signed) by least squares, then split onto row pairs
    if red.E.shape[0]:
        nu = np.linalg.lstsq(red.E.T, -resid, rcond=None)[0]
        nfix = int(red.fixed.sum())
        off = red.c.size + sum(red.n_nl)
        for k, j in enumerate(np.flatnonzero(red.fixed)):
            mult[off + red.n + j] += max(nu[k], 0.0)
            mult[off + j] += max(-nu[k], 0.0)
        for k, i in enumerate(red.eq_rows):
            v = nu[nfix + k]
            mult[i] += max(v, 0.0)
            mult[red.paired[i]] += max(-v, 0.0)
        resid = gx + Gall.T @ mult

    stationarity = float(np.abs(resid).max(initial=0.0))
    finite = np.isfinite(gall)
    feasibility = float(max(0.0, gall[finite].max(initial=0.0)))
    if red.E.shape[0]:
        feasibility = max(feasibility, float(np.abs(red.E @ x - red.e).max()))
    comp = np.where(finite, mult * np.where(finite, gall, 0.0), 0.0)
    complementarity = float(np.abs(comp).max(initial=0.0))
    kkt = max(stationarity, feasibility, complementarity)

    eq_slots = set(red.eq_rows) | {int(red.paired[i]) for i in red.eq_rows}
    off = red.c.size + sum(red.n_nl)
    for j in np.flatnonzero(red.fixed):
        eq_slots |= {off + j, off + red.n + j}
    slack = np.where(finite, -gall, np.inf)
    active = sorted(eq_slots | set(np.flatnonzero((mult > 0) & (mult >= slack)).tolist()))

    ok = stationarity <= opts.kkt_tol and feasibility <= 1e-8 and complementarity <= opts.kkt_tol
    return SolveReport(wrap(x), f, kkt, active, mult / scale, iters,
                       SolveStatus.CONVERGED if ok else SolveStatus.MAX_ITER,
                       stationarity, feasibility, complementarity, g_raw, history, B / scale,
                       scale)


# ---------------------------------------------------------------------------
# model-level helpers

def model_bounds(data: MEDataset, spec: ModelSpec):
    return spec.bounds.arrays(*spec.sizes(data), sigma_floor=spec.sigma_floor)


def model_constraints(data: MEDataset, spec: ModelSpec) -> LinearConstraintSet | None:
    lin = spec.constraints
    if lin is None or lin.n_rows == 0:
        return None
    kb, kg, ks = spec.sizes(data)
    if lin.n_cols == kb and kg + ks:
        lin = lin.pad_to_theta(kg, ks)
    return lin


def default_theta0(data: MEDataset, spec: ModelSpec) -> Theta:
    """Model-default beta, unit gamma and the residual SD for sigma."""
    if spec.theta0 is not None:
        return spec.theta0
    model = spec.obs_model
    beta = np.asarray(model.default_beta0(data.y), float)
    kb, kg, ks = spec.sizes(data)
    sigma = np.zeros(0)
    if ks:
        try:
            r = data.y - evaluate(model, beta, data)
            sd = float(np.std(r)) if r.size > 1 else 1.0
        except DomainError:
            sd = float(np.std(data.y)) if data.n_total > 1 else 1.0
        sd = sd if np.isfinite(sd) and sd > 10 * spec.sigma_floor else 1.0
        sigma = np.full(ks, sd)
    return Theta(beta, np.ones(kg), sigma)


def _objective_fn(w, data, spec, var_reference):
    sizes = spec.sizes(data)

    def fun(x):
        ov = trimmed_neg_loglik(Theta.from_flat(x, *sizes), w, data, spec, var_reference)
        return ov.value, ov.grad_theta
    return fun


def solve_theta(w, data: MEDataset, spec: ModelSpec, theta_warm: Theta | None = None,
                *, var_reference: float = 1.0, hess0=None) -> SolveReport:
    """Inner problem: minimize the trimmed objective over theta at fixed ``w``."""
    w = np.ones(data.n_total) if w is None else np.asarray(getattr(w, "w", w), float)
    theta0 = theta_warm if theta_warm is not None else default_theta0(data, spec)
    return minimize_constrained(_objective_fn(w, data, spec, var_reference),
                                model_bounds(data, spec), model_constraints(data, spec),
                                spec.nonlinear_constraints, theta0, spec.solver,
                                warm=theta_warm is not None, hess0=hess0)


def value_function(w, data: MEDataset, model: ModelSpec, theta_warm: Theta | None = None,
                   *, var_reference: float = 1.0, hess0=None):
    """``(v, grad_v, report)`` with ``v(w) = min_theta L(theta, w)``.

    ``grad_v`` is the w-gradient of the trimmed objective at the inner
    minimizer; it is only approximate when ``report.converged`` is False.
    """
    w = np.asarray(getattr(w, "w", w), float)
    rep = solve_theta(w, data, model, theta_warm, var_reference=var_reference, hess0=hess0)
    if rep.status is SolveStatus.INFEASIBLE:
        return np.nan, None, rep
    ov = trimmed_neg_loglik(rep.theta_star, w, data, model, var_reference)
    return ov.value, ov.grad_w, rep
