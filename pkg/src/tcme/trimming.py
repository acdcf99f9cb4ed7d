"""Trimmed fitting: projected gradient descent on the value function over the capped simplex."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .capped_simplex import project_capped_simplex
from .data_model import MEDataset, ModelSpec, Theta, TrimWeights, variances
from .inner_solver import (NumericError, SolveReport, SolveStatus, default_theta0,
                           solve_theta, value_function)
from .likelihood import trimmed_neg_loglik
from .obs_models import evaluate

BOUNDARY_LO, BOUNDARY_HI = 0.01, 0.99
MAX_REFERENCE_UPDATES = 5


class FitError(RuntimeError):
    pass


@dataclass
class FitResult:
    theta: Theta
    w: TrimWeights
    objective: float
    outliers: list
    inner_report: SolveReport
    outer_iterations: int
    converged: bool
    outlier_index: list = field(default_factory=list)
    boundary: list = field(default_factory=list)
    var_reference: float = 1.0
    history: list = field(default_factory=list, repr=False)  # v per iteration, one list per descent

    @property
    def h(self) -> float:
        return self.w.h


def classify_outliers(w, threshold: float = 0.5) -> list[int]:
    """Flat indices with ``w_j < threshold`` in (group, row) order."""
    w = np.asarray(getattr(w, "w", w), float)
    return np.flatnonzero(w < threshold).tolist()


def resolve_var_reference(data: MEDataset, spec: ModelSpec) -> float:
    """Variance unit for the weight interpolation.

    ``"auto"`` takes the largest measurement variance at the starting point
    (the largest ``se^2`` for known errors, otherwise the residual variance of
    the initial fit), so that ``lam / ref <= 1`` along the fit and the weight
    gradient ranks observations by their scaled residuals.
    """
    ref = spec.var_reference
    if isinstance(ref, str):
        if ref != "auto":
            raise ValueError(f"unknown var_reference {ref!r}")
        lam = variances(default_theta0(data, spec), data, spec.error)
        return float(lam.max())
    if not ref > 0:
        raise ValueError("var_reference must be positive")
    return float(ref)


def _finish(data, spec, theta, w, h, rep, iters, converged, ref, history) -> FitResult:
    idx = classify_outliers(w)
    boundary = np.flatnonzero((w > BOUNDARY_LO) & (w < BOUNDARY_HI)).tolist()
    obj = trimmed_neg_loglik(theta, w, data, spec).value
    return FitResult(theta, TrimWeights(w, h), obj, [data.locate(j) for j in idx], rep,
                     iters, bool(converged and rep.converged), idx, boundary, ref, history)


def _check(rep: SolveReport, v, theta_last):
    if rep.status is SolveStatus.INFEASIBLE:
        raise FitError("inner problem has no strictly feasible point")
    if not np.isfinite(v):
        raise NumericError("value function is not finite", None if theta_last is None
                           else theta_last.flat())


def fit_trimmed(data: MEDataset, spec: ModelSpec, w0=None, theta0: Theta | None = None
                ) -> FitResult:
    """Jointly estimate theta and trimming weights ``w`` in the capped simplex.

    Each outer iteration solves the inner problem at the current ``w``
    (warm-started from the previous minimizer) and takes a projected gradient
    step ``w+ = proj(w - alpha grad v(w))`` with backtracking from
    ``alpha = 1`` under an Armijo test. Iteration stops when the unit
    projected step moves ``w`` by at most ``w_tol`` in the max norm, when the
    line search cannot make progress (a stationary point up to the step
    floor), or after ``max_outer`` iterations.

    The descent is then restarted (at most ``solver.restarts`` times) from the
    vertex that trims the ``n - h`` largest marginal residuals ``|y - f(beta)|``
    of the current fit, keeping the restart only if it lowers the objective.
    With ``var_reference="auto"`` the variance unit is re-centred on the
    fitted variances and the descent repeated while it moves by more than 2x.

    Parameters
    ----------
    w0 : array, optional
        Starting weights (default ``(h / n) * 1``); projected onto the simplex.
    theta0 : Theta, optional
        Starting parameters for the first inner solve.
    """
    n = data.n_total
    h = spec.h(data)
    if spec.theta0 is not None and theta0 is None:
        theta0 = spec.theta0

    if h == n:
        w = np.ones(n)
        rep = solve_theta(w, data, spec, theta0)
        _check(rep, rep.objective, theta0)
        return _finish(data, spec, rep.theta_star, w, h, rep, 0, True, 1.0, [[rep.objective]])

    w = np.full(n, h / n) if w0 is None else project_capped_simplex(w0, h)
    best = _fit_from(data, spec, w, h, theta0)
    # restart from the vertex trimming the largest marginal residuals; these
    # ignore the random effects, which a large gamma can bend towards outliers
    for _ in range(spec.solver.restarts):
        r = np.abs(data.y - evaluate(spec.obs_model, best.theta.beta, data))
        w1 = np.ones(n)
        w1[np.argsort(-r, kind="stable")[:n - h]] = 0.0
        if np.array_equal(w1, np.round(best.w.w)):
            break
        cand = _fit_from(data, spec, w1, h, best.theta)
        if not cand.objective < best.objective - 1e-9:
            break
        cand.outer_iterations += best.outer_iterations
        cand.history = best.history + cand.history
        best = cand
    return best


def _fit_from(data, spec, w, h, theta0) -> FitResult:
    auto = isinstance(spec.var_reference, str)
    ref = resolve_var_reference(data, spec)
    theta = theta0
    history, total = [], 0
    for _ in range(MAX_REFERENCE_UPDATES):
        w, theta, rep, it, converged, hist = _descend(data, spec, w, h, theta, ref)
        total += it
        history.append(hist)
        if not auto:
            break
        # re-centre the variance unit on the fitted variances; at 0/1 weights
        # this shifts v by a constant, so only a large change is worth a rerun
        new_ref = float(variances(theta, data, spec.error).max())
        if abs(np.log(new_ref / ref)) <= np.log(2.0):
            break
        ref = new_ref
    return _finish(data, spec, theta, w, h, rep, total, converged, ref, history)


def _descend(data, spec, w, h, theta0, ref):
    """Projected gradient iterations on v(w) for one variance reference."""
    opts = spec.solver
    v, g, rep = value_function(w, data, spec, theta0, var_reference=ref)
    _check(rep, v, theta0)
    history = [v]
    converged = False
    it = 0
    while it < opts.max_outer:
        if np.abs(project_capped_simplex(w - g, h) - w).max() <= opts.w_tol:
            converged = True
            break
        alpha = 1.0
        step = None
        while alpha >= opts.min_step:
            wn = project_capped_simplex(w - alpha * g, h)
            if np.abs(wn - w).max() <= 1e-15:
                alpha *= 0.5
                continue
            vn, gn, repn = value_function(wn, data, spec, rep.theta_star,
                                          var_reference=ref, hess0=rep.hessian)
            if repn.status is SolveStatus.INFEASIBLE:
                raise FitError("inner problem has no strictly feasible point")
            if np.isfinite(vn) and vn <= v + opts.armijo * float(g @ (wn - w)):
                step = (wn, vn, gn, repn)
                break
            alpha *= 0.5
        it += 1
        if step is None:
            # no descent along the projected arc: stationary up to the step floor
            converged = True
            break
        wn, vn, gn, repn = step
        moved = np.abs(wn - w).max()
        w, v, g, rep = wn, vn, gn, repn
        history.append(v)
        if moved <= opts.w_tol:
            converged = True
            break
    return w, rep.theta_star, rep, it, converged, history
