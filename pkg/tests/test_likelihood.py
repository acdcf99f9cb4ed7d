import numpy as np
import pytest

from helpers import central_diff, linear_spec, random_dataset, random_theta, rel_err
from tcme.data_model import (ErrorSpec, GaussianPrior, Group, MEDataset, ModelSpec, Theta,
                             TrimWeights, variances)
from tcme.likelihood import (InvalidVarianceError, check_wellposedness, neg_marginal_loglik,
                             spectral_margin, trimmed_neg_loglik, wellposedness_margin)
from tcme.obs_models import DomainError, LinearModel, LogSplineModel


def dense_trimmed(theta, w, data, spec):
    """Direct evaluation with explicit covariance matrices."""
    lam = variances(theta, data, spec.error)
    r = data.y - spec.obs_model.f(theta.beta)
    total = 0.0
    for i in range(data.m):
        s = data.group_slice(i)
        S = np.diag(np.sqrt(w[s]))
        Z = data.Z[s]
        A = S @ Z @ np.diag(theta.gamma) @ Z.T @ S + np.diag(lam[s] ** w[s])
        q = S @ r[s]
        total += 0.5 * q @ np.linalg.solve(A, q) + 0.5 * np.linalg.slogdet(A)[1]
    for p in spec.priors:
        total += p.penalty(theta.beta)[0]
    return total


def scalar_data(y, se=1.0, gamma_col=1.0):
    g = Group("a", [y], [[gamma_col]], np.zeros((1, 0)), [se])
    return MEDataset([g])


def intercept_spec(data, error="known"):
    return ModelSpec(LinearModel(np.ones((data.n_total, 1))), ErrorSpec(error))


class TestScalarCases:
    def test_no_random_effect(self):
        d = scalar_data(2.0)
        spec = ModelSpec(LinearModel(np.zeros((1, 1))), ErrorSpec("known"))
        assert neg_marginal_loglik(Theta([0.0], [0.0]), d, spec).value == pytest.approx(2.0)

    def test_random_effect_only(self):
        d = scalar_data(0.0)
        spec = ModelSpec(LinearModel(np.zeros((1, 1))), ErrorSpec("known"))
        v = neg_marginal_loglik(Theta([0.0], [3.0]), d, spec).value
        assert v == pytest.approx(0.5 * np.log(4.0), abs=1e-12)

    def test_fractional_weight(self):
        # w = 0.5, gamma = 1, lambda = 4, r = 2: sqrt(w) r = sqrt(2), A = 0.5 + 4^0.5
        d = scalar_data(2.0, se=2.0)
        spec = ModelSpec(LinearModel(np.zeros((1, 1))), ErrorSpec("known"))
        v = trimmed_neg_loglik(Theta([0.0], [1.0]), np.array([0.5]), d, spec).value
        assert v == pytest.approx(0.5 * 2.0 / 2.5 + 0.5 * np.log(2.5), abs=1e-12)
        assert v == pytest.approx(0.858145, abs=1e-6)


@pytest.mark.parametrize("error", ["known", "shared", "group"])
def test_dense_oracle(rng, error):
    data = random_dataset(rng, sizes=(4, 4, 4), k_gamma=2, k_beta=3)
    spec = linear_spec(data, error)
    for _ in range(5):
        th = random_theta(rng, data, spec)
        w = rng.uniform(0, 1, data.n_total)
        v = trimmed_neg_loglik(th, w, data, spec).value
        assert v == pytest.approx(dense_trimmed(th, w, data, spec), rel=1e-10)
        v1 = neg_marginal_loglik(th, data, spec).value
        assert v1 == pytest.approx(dense_trimmed(th, np.ones(data.n_total), data, spec), rel=1e-10)


@pytest.mark.parametrize("k_gamma", [1, 2, 3])
def test_low_rank_path_matches_dense_on_large_groups(rng, k_gamma):
    data = random_dataset(rng, sizes=(50, 17, 33), k_gamma=k_gamma, k_beta=2)
    spec = linear_spec(data, "shared")
    th = random_theta(rng, data, spec)
    w = rng.uniform(0, 1, data.n_total)
    v = trimmed_neg_loglik(th, w, data, spec).value
    assert v == pytest.approx(dense_trimmed(th, w, data, spec), rel=1e-10)


def test_all_ones_equals_untrimmed(rng):
    data = random_dataset(rng)
    spec = linear_spec(data, "group")
    th = random_theta(rng, data, spec)
    a = trimmed_neg_loglik(th, TrimWeights(np.ones(data.n_total), data.n_total), data, spec)
    b = neg_marginal_loglik(th, data, spec)
    assert a.value == b.value
    np.testing.assert_array_equal(a.grad_theta, b.grad_theta)


def test_two_row_deletion_example():
    g = Group("a", [0.3, -1.2], [[1.0], [1.0]], np.zeros((2, 0)), [0.7, 1.5])
    data = MEDataset([g])
    spec = intercept_spec(data)
    th = Theta([0.1], [0.4])
    v = trimmed_neg_loglik(th, np.array([1.0, 0.0]), data, spec).value
    d1 = MEDataset([Group("a", [0.3], [[1.0]], np.zeros((1, 0)), [0.7])])
    ref = neg_marginal_loglik(th, d1, intercept_spec(d1)).value
    assert abs(v - ref) <= 1e-12


@pytest.mark.parametrize("error", ["known", "shared", "group"])
def test_deletion_identity_every_row(rng, error):
    data = random_dataset(rng, sizes=(3, 4, 2), k_gamma=2, k_beta=2)
    spec = linear_spec(data, error)
    th = random_theta(rng, data, spec)
    for j in range(data.n_total):
        w = np.ones(data.n_total)
        w[j] = 0.0
        v = trimmed_neg_loglik(th, w, data, spec).value
        dj = data.drop(j)
        ref = neg_marginal_loglik(th, dj, linear_spec(dj, error)).value
        assert abs(v - ref) <= 1e-12 * max(1.0, abs(ref))


@pytest.mark.parametrize("error", ["known", "shared", "group"])
@pytest.mark.parametrize("ref", [1.0, 3.0])
def test_gradients_match_finite_differences(rng, error, ref):
    for trial in range(7):
        data = random_dataset(rng, sizes=(3, 4, 2), k_gamma=2, k_beta=3)
        spec = linear_spec(data, error)
        th = random_theta(rng, data, spec)
        w = rng.uniform(0.05, 0.95, data.n_total)
        sizes = spec.sizes(data)
        ov = trimmed_neg_loglik(th, w, data, spec, var_reference=ref)

        def f_theta(x):
            return trimmed_neg_loglik(Theta.from_flat(x, *sizes), w, data, spec, ref).value

        def f_w(x):
            return trimmed_neg_loglik(th, x, data, spec, ref).value

        assert rel_err(ov.grad_theta, central_diff(f_theta, th.flat())) <= 1e-5
        assert rel_err(ov.grad_w, central_diff(f_w, w)) <= 1e-5


def test_prior_enters_value_and_gradient(rng):
    data = random_dataset(rng, k_beta=3)
    base = linear_spec(data, "shared")
    prior = GaussianPrior(np.array([[1.0, -1.0, 0.0]]), [0.5], [0.2])
    spec = base.with_(priors=(prior,))
    th = random_theta(rng, data, spec)
    a, b = neg_marginal_loglik(th, data, spec), neg_marginal_loglik(th, data, base)
    z = (th.beta[0] - th.beta[1] - 0.5) / 0.2
    assert a.value - b.value == pytest.approx(0.5 * z * z)
    np.testing.assert_allclose(a.grad_theta[:3] - b.grad_theta[:3],
                               np.array([1.0, -1.0, 0.0]) * z / 0.2, atol=1e-12)


def test_coercive_in_gamma(rng):
    data = random_dataset(rng, k_gamma=2)
    spec = linear_spec(data, "known")
    beta = np.zeros(spec.k_beta)
    vals = [neg_marginal_loglik(Theta(beta, [g, 0.5]), data, spec).value
            for g in (1e2, 1e4, 1e6)]
    assert vals[0] < vals[1] < vals[2]
    assert vals[2] - vals[0] > 5.0


def test_invalid_variance_rejected(rng):
    data = random_dataset(rng, se=False)
    spec = linear_spec(data, "shared")
    th = Theta(np.zeros(spec.k_beta), [1.0, 1.0], [0.0])
    with pytest.raises(InvalidVarianceError):
        neg_marginal_loglik(th, data, spec)


def test_weights_validated(rng):
    data = random_dataset(rng)
    spec = linear_spec(data)
    th = random_theta(rng, data, spec)
    with pytest.raises(ValueError):
        trimmed_neg_loglik(th, np.full(data.n_total, 1.5), data, spec)
    with pytest.raises(ValueError):
        trimmed_neg_loglik(th, np.ones(3), data, spec)


def test_domain_error_names_group_and_row():
    g0 = Group("a", [0.0, 0.0], [[1.0], [1.0]], np.zeros((2, 0)), [1.0, 1.0])
    g1 = Group("b", [0.0, 0.0], [[1.0], [1.0]], np.zeros((2, 0)), [1.0, 1.0])
    data = MEDataset([g0, g1])
    X = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    spec = ModelSpec(LogSplineModel(X), ErrorSpec("known"))
    with pytest.raises(DomainError) as exc:
        neg_marginal_loglik(Theta([1.0, -1.0], [0.1]), data, spec)
    assert exc.value.where == ("b", 1)


class TestWellposedness:
    def test_meta_analysis_never_flagged(self, rng):
        data = random_dataset(rng)
        spec = linear_spec(data, "known")
        rep = check_wellposedness(Theta(np.zeros(spec.k_beta), [0.0, 0.0]), data, spec)
        assert rep.ok and not rep.flagged

    def test_zero_residual_at_floor_flagged(self):
        g = Group("a", [1.0, 1.0], [[1.0], [1.0]], np.zeros((2, 0)))
        data = MEDataset([g])
        spec = intercept_spec(data, "shared")
        rep = check_wellposedness(Theta([1.0], [0.0], [1e-8]), data, spec)
        assert rep.flagged == ["a"]

    def test_margin_definition(self):
        assert spectral_margin([2.0, 0.0], [1e-12, 3.0]) == 2.0
        assert spectral_margin([2.0, 0.0], [1e-12, 3.0]) >= 0.1

    def test_margin_from_covariance(self):
        V = np.diag([4.0, 0.01])
        assert wellposedness_margin(np.array([0.0, 0.5]), V) == pytest.approx(0.5)
