import json

import numpy as np
import pytest

from effreg import (
    Dataset, DomainError, FitConfig, PreconditionError, confidence_intervals, covariance_bound,
    covariance_sandwich, exponential_model, linear_model, ols_fit, solve_efficient,
)
from effreg.simulate import bundled_scenario

from conftest import linear_data


def test_normal_mode_equals_ols(rng):
    for _ in range(5):
        d = linear_data(rng, n=100, sd=rng.uniform(0.5, 3))
        fit = solve_efficient(d, linear_model(2), FitConfig(error_mode="normal"))
        assert fit.converged
        np.testing.assert_allclose(fit.theta.beta, ols_fit(d).beta, rtol=0, atol=1e-8)


def test_bound_matches_ols_covariance(rng):
    d = linear_data(rng, n=1000)
    fit = solve_efficient(d, linear_model(2), FitConfig(covariance="bound"))
    X = np.column_stack([np.ones(d.n), d.x])
    v = fit.theta.v
    ols_cov = v * np.linalg.inv(X.T @ X / d.n) / d.n
    np.testing.assert_allclose(np.diag(fit.covariance)[:3], np.diag(ols_cov), rtol=0.10)
    assert fit.covariance[3, 3] == pytest.approx(2 * v**2 / d.n, rel=0.10)


def test_sandwich_agrees_with_bound_under_normality(rng):
    # the sandwich v entry rests on a sample fourth moment (~15% noise at n=1000)
    d = linear_data(rng, n=20000)
    fit = solve_efficient(d, linear_model(2))
    b = covariance_bound(d, fit)
    s = covariance_sandwich(d, fit)
    np.testing.assert_allclose(np.diag(s), np.diag(b), rtol=0.15)
    scale = np.sqrt(np.outer(np.diag(b), np.diag(b)))
    assert np.all(np.abs(s - b) <= 0.15 * scale)
    for c in (b, s):
        np.testing.assert_array_equal(c, c.T)
        assert np.linalg.eigvalsh(c).min() >= -1e-10 * np.trace(c)


@pytest.mark.parametrize("mode", ["gumbel", "kernel"])
def test_single_gumbel_replication_within_five_se(mode):
    sc = bundled_scenario("gumbel_n1000")
    data = sc.draw(0)
    fit = solve_efficient(data, exponential_model(), FitConfig(error_mode=mode))
    assert fit.converged
    assert np.all(np.abs(fit.theta.as_vector() - sc.true_theta()) <= 5 * fit.se)
    assert fit.score_norm <= 1e-8


def test_mixture_mode_on_linear_data():
    sc = bundled_scenario("mixture_n500")
    fit = solve_efficient(sc.draw(1), exponential_model(), FitConfig(error_mode="mixture"))
    assert fit.converged and fit.error_model["kind"] == "mixture"
    assert np.all(np.abs(fit.theta.as_vector() - sc.true_theta()) <= 5 * fit.se)


def test_fit_result_serialization(rng):
    d = linear_data(rng, n=200)
    fit = solve_efficient(d, linear_model(2), FitConfig(error_mode="kernel"))
    out = json.loads(fit.to_json())
    for key in ("theta", "se", "ci95", "covariance", "error_model", "iterations", "converged",
                "clamp_count"):
        assert key in out
    assert len(out["covariance"]) == 16
    assert out["error_model"]["kind"] == "kernel"
    np.testing.assert_allclose(fit.se, np.sqrt(np.diag(fit.covariance)))


def test_confidence_intervals(rng):
    fit = solve_efficient(linear_data(rng, n=200), linear_model(2))
    ci = confidence_intervals(fit)
    np.testing.assert_allclose(ci[:, 1] - ci[:, 0], 2 * 1.959963984540054 * fit.se)
    with pytest.raises(DomainError):
        confidence_intervals(fit, 1.5)


def test_kernel_fit_is_deterministic(rng):
    d = linear_data(rng, n=150)
    a = solve_efficient(d, linear_model(2), FitConfig(error_mode="kernel"))
    b = solve_efficient(d, linear_model(2), FitConfig(error_mode="kernel"))
    assert a.to_json() == b.to_json()


def test_inadmissible_designs():
    with pytest.raises(PreconditionError):
        solve_efficient(Dataset(np.ones(10), np.arange(10.0)), _intercept_only())
    d = Dataset(np.arange(3.0), np.array([1.0, 3.0, 2.0]))
    with pytest.raises(PreconditionError):
        solve_efficient(d, linear_model(1))


def _intercept_only():
    from effreg import custom_model
    return custom_model(lambda x, b: np.full(x.shape[0], b[0]),
                        lambda x, b: np.ones((x.shape[0], 1)), k=1, l=1, param_names=("b0",))


def test_unknown_mode_rejected():
    with pytest.raises(DomainError):
        FitConfig(error_mode="cauchy")
