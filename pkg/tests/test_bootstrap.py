import warnings

import numpy as np
import pytest

import tcme.bootstrap as bootstrap
from tcme.bootstrap import (BootstrapResult, curve_bands, parametric_bootstrap, simulate_replicate,
                            type7_quantiles)
from tcme.data_model import Bounds, ErrorSpec, Group, MEDataset, ModelSpec, Theta
from tcme.obs_models import LinearModel
from tcme.rng import RngStream
from tcme.trimming import fit_trimmed


def intercept_data(rng, m=6, k=5, se=None, sd_u=0.5):
    u = rng.normal(0, sd_u, m)
    groups = []
    for i in range(m):
        y = u[i] + rng.normal(size=k)
        groups.append(Group(f"g{i}", y, np.ones((k, 1)), np.zeros((k, 0)),
                            None if se is None else np.full(k, se)))
    return MEDataset(groups)


def intercept_spec(data, error="shared", **kw):
    return ModelSpec(LinearModel(np.ones((data.n_total, 1))), ErrorSpec(error), **kw)


@pytest.fixture
def fitted(rng):
    data = intercept_data(rng)
    spec = intercept_spec(data)
    return data, spec, fit_trimmed(data, spec)


def test_same_seed_bit_identical(fitted):
    data, spec, fit = fitted
    a = parametric_bootstrap(fit, data, spec, N=8, seed=3)
    b = parametric_bootstrap(fit, data, spec, N=8, seed=3)
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.quantiles, b.quantiles)
    c = parametric_bootstrap(fit, data, spec, N=8, seed=4)
    assert not np.array_equal(a.samples, c.samples)


def test_threads_do_not_change_output(fitted):
    data, spec, fit = fitted
    a = parametric_bootstrap(fit, data, spec, N=6, seed=1, threads=1)
    b = parametric_bootstrap(fit, data, spec, N=6, seed=1, threads=3)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_noise_free_limit(rng):
    # gamma fixed at 0 and tiny known se: every replicate is the same dataset
    data = intercept_data(rng, se=1e-6)
    spec = intercept_spec(data, "known", bounds=Bounds(gamma_ub=0.0))
    fit = fit_trimmed(data, spec)
    res = parametric_bootstrap(fit, data, spec, N=10, seed=0)
    assert res.failures == 0
    assert np.all(res.samples.std(axis=0) <= 1e-3)


def test_replication_order_does_not_matter(fitted):
    data, spec, fit = fitted
    res = parametric_bootstrap(fit, data, spec, N=6, seed=5)
    root = RngStream(5)
    out = {}
    for r in [4, 1, 5, 0, 3, 2]:
        y = simulate_replicate(fit.theta, data, spec, root.substream(r))
        out[r] = fit_trimmed(data.replace(y=y), spec, theta0=fit.theta).theta.flat()
    samples = np.array([out[r] for r in range(6)])
    np.testing.assert_array_equal(samples, res.samples)
    perm = samples[[3, 0, 5, 1, 2, 4]]
    np.testing.assert_array_equal(type7_quantiles(perm), res.quantiles)


def test_replicate_draws_match_model(rng):
    data = intercept_data(rng, m=400, k=3)
    spec = intercept_spec(data)
    th = Theta([2.0], [0.25], [0.5])
    ys = np.array([simulate_replicate(th, data, spec, RngStream(9, (r,))) for r in range(50)])
    assert abs(ys.mean() - 2.0) <= 0.03
    # within-group covariance gamma, variance gamma + sigma^2
    y = ys.reshape(50, 400, 3)
    assert np.var(y) == pytest.approx(0.5, rel=0.05)
    cov = np.mean((y[:, :, 0] - y.mean()) * (y[:, :, 1] - y.mean()))
    assert cov == pytest.approx(0.25, abs=0.03)


def test_type7_quantiles():
    x = np.arange(1.0, 6.0)[:, None]
    np.testing.assert_allclose(type7_quantiles(x, (0.0, 0.5, 0.25, 1.0))[:, 0], [1, 3, 2, 5])
    assert np.all(np.isnan(type7_quantiles(np.zeros((0, 2)))))


def test_failures_counted_and_excluded(fitted, monkeypatch):
    data, spec, fit = fitted
    orig = bootstrap.fit_trimmed
    calls = []

    def flaky(*args, **kw):
        calls.append(1)
        if len(calls) % 3 == 0:
            raise FloatingPointError("boom")
        return orig(*args, **kw)

    monkeypatch.setattr(bootstrap, "fit_trimmed", flaky)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = parametric_bootstrap(fit, data, spec, N=9, seed=0)
    assert res.failures == 3
    assert res.ok.sum() == 6
    assert np.all(np.isnan(res.samples[~res.ok]))
    np.testing.assert_array_equal(res.quantiles, type7_quantiles(res.samples[res.ok]))
    assert res.warning and res.status == "warning"
    assert any("bootstrap refits failed" in str(w.message) for w in caught)


def test_no_warning_at_threshold():
    res = BootstrapResult(np.zeros((10, 1)), np.array([True] * 8 + [False] * 2), np.zeros((3, 1)),
                          2, 0, (1, 0, 0))
    assert not res.warning and res.status == "ok"


def test_curve_bands(fitted):
    data, spec, fit = fitted
    res = parametric_bootstrap(fit, data, spec, N=20, seed=2)
    grid = np.linspace(0, 1, 4)
    fixed, full = curve_bands(res, lambda b: np.full(grid.size, b[0]), loading=np.ones((4, 1)))
    beta0 = type7_quantiles(res.samples[res.ok, :1])[:, 0]
    np.testing.assert_allclose(fixed, np.repeat(beta0[:, None], 4, axis=1))
    assert np.all(full[2] - full[0] >= fixed[2] - fixed[0] - 1e-12)
    assert curve_bands(res, lambda b: b[:1])[1] is None
