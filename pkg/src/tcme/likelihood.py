"""Marginal and trimmed negative log-likelihoods with analytic gradients.

Per group the trimmed objective is

    0.5 r' S (S Z G^2 Z' S + L)^{-1} S r + 0.5 log|S Z G^2 Z' S + L|

with ``S = diag(sqrt(w))``, ``G = diag(sqrt(gamma))`` and
``L = diag(ref^(1-w) * lam^w)`` (``ref = 1`` is the plain elementwise power).
Writing ``c = w / diag(L)``, the determinant lemma and Woodbury give

    quad   = sum(c r^2) - b' M^{-1} b,     b = G Z' diag(c) r
    logdet = sum(log diag(L)) + log|M|,   M = I + G Z' diag(c) Z G

so the weights only enter through ``c`` and ``log diag(L)``; nothing is
divided by ``sqrt(w)`` and ``gamma = 0`` needs no special case. The constant
``n/2 log(2 pi)`` is left out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import ErrorKind, MEDataset, ModelSpec, Theta, variances
from .obs_models import evaluate, evaluate_jacobian


class InvalidVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveValue:
    value: float
    grad_theta: np.ndarray
    grad_w: np.ndarray | None = None


def _prior(theta: Theta, spec: ModelSpec) -> tuple[float, np.ndarray]:
    val, grad = 0.0, np.zeros(theta.beta.size)
    for p in spec.priors:
        v, g = p.penalty(theta.beta)
        val += v
        grad += g
    return val, grad


def _objective(theta: Theta, w, data: MEDataset, spec: ModelSpec,
               var_reference: float = 1.0, want_w: bool = True) -> ObjectiveValue:
    beta, gamma = theta.beta, theta.gamma
    if gamma.size != data.k_gamma:
        raise ValueError(f"gamma has {gamma.size} entries, expected {data.k_gamma}")
    lam = variances(theta, data, spec.error)
    bad = np.flatnonzero(~(lam > 0))
    if bad.size:
        g, row = data.locate(bad[0])
        raise InvalidVarianceError(
            f"nonpositive measurement variance at group {g!r}, row {row}")
    if var_reference <= 0:
        raise ValueError("var_reference must be positive")

    r = data.y - evaluate(spec.obs_model, beta, data)
    J = evaluate_jacobian(spec.obs_model, beta, data)
    n = data.n_total
    w = np.ones(n) if w is None else np.asarray(w, float)

    log_ref = np.log(var_reference)
    log_ratio = np.log(lam) - log_ref
    inv_lt = np.exp(-log_ref - w * log_ratio)        # 1 / diag(L)
    c = w * inv_lt
    sum_log_lt = n * log_ref + float(w @ log_ratio)

    Z, off, gi = data.Z, data.offsets, data.group_index
    k = Z.shape[1]
    G = np.sqrt(np.maximum(gamma, 0.0))
    GZ = Z * G
    cz = c[:, None] * Z
    K = np.add.reduceat(cz[:, :, None] * Z[:, None, :], off, axis=0)     # (m, k, k)
    p = np.add.reduceat(cz * r[:, None], off, axis=0)                     # (m, k)
    GG = G[:, None] * G[None, :]
    M = np.eye(k) + K * GG
    b = p * G
    Minv = np.linalg.inv(M)
    u = np.einsum("ijl,il->ij", Minv, b)
    sign, logdet_M = np.linalg.slogdet(M)
    if np.any(sign <= 0):
        raise InvalidVarianceError("covariance is not positive definite")

    a = np.einsum("nj,nj->n", GZ, u[gi])
    hdiag = np.einsum("nj,njl,nl->n", GZ, Minv[gi], GZ)
    resid = r - a
    quad = float(c @ (r * r)) - float(np.sum(b * u))
    prior_val, prior_grad = _prior(theta, spec)
    value = 0.5 * (quad + sum_log_lt + float(logdet_M.sum())) + prior_val

    grad_beta = -J.T @ (c * resid) + prior_grad

    KG = K * G[None, None, :]
    T = np.einsum("ijl,ilp,iqp->ijq", KG, Minv, KG)
    q = p - np.einsum("ijl,il->ij", KG, u)
    grad_gamma = 0.5 * np.sum(np.einsum("ijj->ij", K) - np.einsum("ijj->ij", T) - q * q, axis=0)

    e = resid * resid + hdiag
    if spec.error.kind is ErrorKind.KNOWN:
        grad_sigma = np.zeros(0)
    else:
        grad_lam = 0.5 * (w / lam) * (1.0 - e * c)
        dsig = grad_lam * 2.0 * np.sqrt(lam)
        if spec.error.kind is ErrorKind.SHARED:
            grad_sigma = np.array([dsig.sum()])
        else:
            grad_sigma = np.add.reduceat(dsig, off)

    grad_w = None
    if want_w:
        grad_w = 0.5 * e * inv_lt * (1.0 - w * log_ratio) + 0.5 * log_ratio

    return ObjectiveValue(value, np.concatenate([grad_beta, grad_gamma, grad_sigma]), grad_w)


def neg_marginal_loglik(theta: Theta, data: MEDataset, model: ModelSpec) -> ObjectiveValue:
    """Untrimmed marginal negative log-likelihood plus priors (no grad_w)."""
    return _objective(theta, None, data, model, 1.0, want_w=False)


def trimmed_neg_loglik(theta: Theta, w, data: MEDataset, model: ModelSpec,
                       var_reference: float = 1.0) -> ObjectiveValue:
    """Trimmed objective and its gradients in theta and w.

    ``w`` may be a :class:`TrimWeights` or a plain vector in [0, 1]^n.
    ``var_reference`` is the variance unit of the weight interpolation
    ``diag(L) = ref^(1-w) lam^w``. With the default 1 this is ``lam^w``; any
    other value changes the objective only by the constant
    ``(n - sum(w)) / 2 * log(ref)`` at 0/1 weights.
    """
    w = getattr(w, "w", w)
    w = np.asarray(w, float)
    if w.shape != (data.n_total,):
        raise ValueError(f"w must have length {data.n_total}")
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("w must lie in [0, 1]")
    return _objective(theta, w, data, model, var_reference, want_w=True)


@dataclass(frozen=True)
class WellposednessReport:
    margins: dict[str, float]
    flagged: list[str]
    alpha_tol: float

    @property
    def ok(self) -> bool:
        return not self.flagged


def spectral_margin(r_tilde, eigvals) -> float:
    """``min_j max(|r_tilde_j|, eigval_j)``."""
    return float(np.min(np.maximum(np.abs(np.asarray(r_tilde, float)),
                                   np.asarray(eigvals, float))))


def wellposedness_margin(r, V) -> float:
    """Spectral margin of residual ``r`` against covariance ``V``."""
    lam, X = np.linalg.eigh(np.asarray(V, float))
    return spectral_margin(X.T @ np.asarray(r, float), lam)


def check_wellposedness(theta: Theta, data: MEDataset, model: ModelSpec,
                        alpha_tol: float = 1e-6) -> WellposednessReport:
    """Flag groups whose whitened residual and covariance spectrum both collapse.

    A group is flagged when some eigen-direction of its marginal covariance
    has both a tiny eigenvalue and a tiny residual component, which is where
    the likelihood stops being bounded below.
    """
    lam = variances(theta, data, model.error)
    r = data.y - evaluate(model.obs_model, theta.beta, data)
    margins, flagged = {}, []
    for i, g in enumerate(data.groups):
        s = data.group_slice(i)
        V = (g.Z * theta.gamma) @ g.Z.T + np.diag(lam[s])
        margins[g.id] = wellposedness_margin(r[s], V)
        if margins[g.id] < alpha_tol:
            flagged.append(g.id)
    return WellposednessReport(margins, flagged, alpha_tol)
