"""Shared builders and finite-difference helpers for the tests."""
import itertools

import numpy as np

from tcme.data_model import ErrorSpec, Group, MEDataset, ModelSpec, Theta
from tcme.obs_models import LinearModel

ACCEPTANCE = []  # one summary line per acceptance criterion, printed at session end


def random_dataset(rng, sizes=(4, 3, 5), k_gamma=2, k_beta=2, se=True):
    """Dataset with covariates x0.. and random loadings; y drawn at random."""
    groups = []
    for i, n in enumerate(sizes):
        X = rng.normal(size=(n, k_beta - 1))
        Z = np.column_stack([np.ones(n), rng.normal(size=(n, k_gamma - 1))])
        y = rng.normal(scale=2.0, size=n)
        groups.append(Group(f"g{i}", y, Z, X, rng.uniform(0.5, 2.0, n) if se else None))
    return MEDataset(groups, [f"x{j}" for j in range(k_beta - 1)])


def linear_spec(data, error="known", **kw):
    return ModelSpec(LinearModel.from_dataset(data, data.covariate_names), ErrorSpec(error), **kw)


def random_theta(rng, data, spec):
    kb, kg, ks = spec.sizes(data)
    return Theta(rng.normal(size=kb), rng.uniform(0.1, 2.0, kg), rng.uniform(0.5, 2.0, ks))


def central_diff(fun, x, rel=1e-6):
    """Central differences with a step scaled to each coordinate."""
    x = np.asarray(x, float)
    g = np.empty_like(x)
    for j in range(x.size):
        h = rel * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1.0))


def gls_value(data, spec, gamma):
    """Minimum over beta of the untrimmed objective at fixed gamma, known se (closed form)."""
    from tcme.likelihood import neg_marginal_loglik
    X = spec.obs_model.X
    A, b = 0.0, 0.0
    for i in range(data.m):
        s = data.group_slice(i)
        V = data.Z[s] @ np.diag(gamma) @ data.Z[s].T + np.diag(data.se[s] ** 2)
        A = A + X[s].T @ np.linalg.solve(V, X[s])
        b = b + X[s].T @ np.linalg.solve(V, data.y[s])
    beta = np.linalg.solve(A, b)
    return neg_marginal_loglik(Theta(beta, gamma), data, spec).value


def loo_instance(rng):
    """Small instance (n <= 8) with fixed gamma and known se for leave-one-out checks."""
    from tcme.data_model import Bounds, Group
    n = int(rng.integers(4, 9))
    m = int(rng.integers(1, min(3, n - 1) + 1))
    cuts = np.sort(rng.choice(np.arange(1, n), m - 1, replace=False))
    sizes = np.diff(np.concatenate([[0], cuts, [n]]))
    x = rng.uniform(0, 1, n)
    gamma = rng.uniform(0.05, 1.0, 1)
    se = rng.uniform(0.5, 1.5, n)
    u = rng.normal(0, np.sqrt(gamma[0]), m)
    y = 1 + 2 * x + np.repeat(u, sizes) + rng.normal(0, se)
    y[rng.integers(n)] += rng.choice([-1, 1]) * rng.uniform(0, 6)
    groups, start = [], 0
    for i, k in enumerate(sizes):
        s = slice(start, start + k)
        groups.append(Group(f"g{i}", y[s], np.ones((k, 1)), x[s, None], se[s]))
        start += k
    data = MEDataset(groups, ("x",))
    spec = ModelSpec(LinearModel.from_dataset(data, ("x",)), ErrorSpec("known"),
                     n_inliers=n - 1, bounds=Bounds(gamma_lb=gamma, gamma_ub=gamma))
    return data, spec, gamma


def loo_values(data, spec, gamma):
    out = []
    for j in range(data.n_total):
        dj = data.drop(j)
        out.append(gls_value(dj, spec.with_(obs_model=LinearModel.from_dataset(dj, ("x",)),
                                            n_inliers=None), gamma))
    return np.array(out)


def weighted_value(data, X, gamma, w, ref):
    """Closed-form ``min_beta`` of the weighted objective at fixed gamma, known se.

    Rows with ``w > 0`` enter with covariance ``gamma Z Z' + diag(ltilde / w)``,
    ``ltilde = ref^(1-w) se^(2w)``; a zero-weight row only adds ``log(ref) / 2``.
    """
    keep = w > 0
    lt = ref ** (1 - w) * data.se ** (2 * w)
    A, b, blocks = 0.0, 0.0, []
    for i in range(data.m):
        s = np.arange(data.n_total)[data.group_slice(i)]
        s = s[keep[s]]
        if s.size == 0:
            continue
        V = gamma[0] * np.outer(data.Z[s, 0], data.Z[s, 0]) + np.diag(lt[s] / w[s])
        A = A + X[s].T @ np.linalg.solve(V, X[s])
        b = b + X[s].T @ np.linalg.solve(V, data.y[s])
        blocks.append((s, V))
    beta = np.linalg.solve(A, b)
    val = 0.5 * np.log(ref) * np.count_nonzero(~keep)
    for s, V in blocks:
        r = data.y[s] - X[s] @ beta
        val += 0.5 * (r @ np.linalg.solve(V, r) + np.linalg.slogdet(V)[1] + np.log(w[s]).sum())
    return val


def projected_step(data, spec, gamma, w, ref, eps=1e-6):
    """Max-norm move of the unit projected gradient step, gradient by differences."""
    from tcme.capped_simplex import project_capped_simplex
    X = spec.obs_model.X
    g = np.empty(w.size)
    for j in range(w.size):
        lo, hi = max(w[j] - eps, 0.0), min(w[j] + eps, 1.0)
        wp, wm = w.copy(), w.copy()
        wp[j], wm[j] = hi, lo
        g[j] = (weighted_value(data, X, gamma, wp, ref)
                - weighted_value(data, X, gamma, wm, ref)) / (hi - lo)
    return np.abs(project_capped_simplex(w - g, w.sum()) - w).max()


def loo_trial(rng):
    """One trimming-vs-enumeration trial.

    Returns ``(match, stationary_ok)``. A mismatch is acceptable when the fit
    stopped at a stationary point: converged, its value within 1e-6 of the
    closed-form value at its weights, and a unit projected gradient step
    (computed independently) that leaves the weights in place.
    """
    from tcme.likelihood import trimmed_neg_loglik
    from tcme.trimming import fit_trimmed
    data, spec, gamma = loo_instance(rng)
    vals = loo_values(data, spec, gamma)
    fit = fit_trimmed(data, spec)
    w = fit.w.w
    dropped = int(np.argmin(w))
    match = dropped == int(np.argmin(vals)) and w[dropped] < 0.5
    ref = fit.var_reference
    v = trimmed_neg_loglik(fit.theta, w, data, spec, ref).value
    oracle = weighted_value(data, spec.obs_model.X, gamma, w, ref)
    stationary = (fit.converged and abs(v - oracle) <= 1e-6
                  and projected_step(data, spec, gamma, w, ref) <= 1e-4)
    return match, stationary


def enumerate_projection(v, h):
    """Brute force over all free / at-0 / at-1 patterns, keeping KKT points."""
    n = v.size
    best = None
    for pattern in itertools.product((0, 1, 2), repeat=n):
        pattern = np.array(pattern)
        free = pattern == 2
        w = np.where(pattern == 1, 1.0, 0.0)
        rest = h - w.sum()
        if free.any():
            mu = (rest - v[free].sum()) / free.sum()
            w[free] = v[free] + mu
        else:
            if abs(rest) > 1e-12:
                continue
            mu = None
        if np.any(w < -1e-12) or np.any(w > 1 + 1e-12):
            continue
        # KKT: at 0 needs v + mu <= 0, at 1 needs v + mu >= 1 (mu free if no free coords)
        if mu is not None:
            if np.any(v[pattern == 0] + mu > 1e-12) or np.any(v[pattern == 1] + mu < 1 - 1e-12):
                continue
        d = 0.5 * np.sum((w - v) ** 2)
        if best is None or d < best[0] - 1e-15:
            best = (d, w)
    return best[1]


def concave_feasible(rng, cs, dim, n):
    """Random points of {C beta <= 0} by sampling the polyhedral cone."""
    out = []
    while len(out) < n:
        beta = rng.normal(scale=3, size=dim)
        viol = cs.C @ beta
        if np.all(viol <= 0):
            out.append(beta)
            continue
        # project a random point onto the cone by a few alternating row projections
        for _ in range(200):
            r = cs.C @ beta
            k = int(np.argmax(r))
            if r[k] <= 0:
                break
            a = cs.C[k]
            beta = beta - (r[k] + 1e-9) * a / (a @ a)
        if np.all(cs.C @ beta <= 0):
            out.append(beta)
    return out
