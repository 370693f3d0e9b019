import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pnorm_erm import EstimatorInconsistency, MaxIterations, MomentViolation, SingularityError
from pnorm_erm.distributions import (
    DistributionSpec,
    GaussianCovariates,
    NoNoise,
    StudentTCovariates,
    gaussian_spec,
    sample,
    stack_rows,
)
from pnorm_erm.erm_solver import (
    SolverOptions,
    empirical_grad,
    empirical_hessian,
    empirical_risk,
    excess_risk,
    fit,
    population_risk,
    population_risk_p2,
)


def test_empirical_risk_examples():
    ds = stack_rows([[1.0, 0.0]], [2.0])
    assert empirical_risk(ds, 2, [0, 0]) == pytest.approx(2.0)
    assert empirical_risk(ds, 3, [0, 0]) == pytest.approx(8 / 6)
    spec = DistributionSpec(GaussianCovariates(np.eye(3)), np.array([1.0, -1.0, 0.5]))
    real = sample(spec, 30, 1)
    assert empirical_risk(real, 1.5, spec.target_weights) == 0.0
    assert np.all(empirical_grad(real, 1.5, spec.target_weights) == 0.0)


def test_p2_hessian_is_gram():
    ds = sample(gaussian_spec(3), 40, 2)
    ref = ds.design.T @ ds.design / ds.n
    for w in (np.zeros(3), np.ones(3)):
        assert np.allclose(empirical_hessian(ds, 2, w), ref, rtol=1e-13)


def test_hessian_singular_at_zero_residual():
    ds = stack_rows([[1.0], [2.0]], [1.0, 3.0])
    with pytest.raises(SingularityError):
        empirical_hessian(ds, 1.5, [1.0])
    assert np.isfinite(empirical_hessian(ds, 1.5, [1.0], mu=1e-3)).all()


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_grad_and_hessian_finite_differences(p):
    ds = sample(gaussian_spec(3), 60, 4)
    w = np.array([0.3, -0.2, 1.1])
    h = 1e-6
    eye = np.eye(3) * h
    g = empirical_grad(ds, p, w)
    fd = np.array([(empirical_risk(ds, p, w + e) - empirical_risk(ds, p, w - e)) / (2 * h) for e in eye])
    assert np.linalg.norm(fd - g) <= 1e-5 * np.linalg.norm(g)
    hm = empirical_hessian(ds, p, w)
    fdh = np.array([(empirical_grad(ds, p, w + e) - empirical_grad(ds, p, w - e)) / (2 * h) for e in eye])
    assert np.linalg.norm(fdh - hm) <= 1e-5 * np.linalg.norm(hm)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_p2_matches_normal_equations(d, seed):
    n = 3 * d + 5
    ds = sample(gaussian_spec(d), n, seed)
    assert np.linalg.norm(fit(ds, 2.0).weights - oracles.normal_equations(ds.design, ds.response)) <= 1e-8


def test_symmetric_1d():
    ds = stack_rows([[1.0], [1.0]], [1.0, -1.0])
    assert abs(fit(ds, 2.0).weights[0]) < 1e-15


@pytest.mark.parametrize("p", [1.5, 3.0])
def test_realizable_recovery(p):
    spec = DistributionSpec(GaussianCovariates(np.eye(4)), np.array([1.0, -2.0, 0.5, 3.0]), NoNoise())
    sol = fit(sample(spec, 20, 3), p)
    assert np.linalg.norm(sol.weights - spec.target_weights) <= 1e-8


@pytest.mark.parametrize("p", [1.1, 1.5, 2.0, 3.0, 6.0])
def test_converges_and_is_optimal(p):
    ds = sample(gaussian_spec(4), 300, 8)
    sol = fit(ds, p)
    assert sol.converged and sol.grad_norm <= sol.tol
    base = empirical_risk(ds, p, sol.weights)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = rng.standard_normal(4)
        assert empirical_risk(ds, p, sol.weights + 1e-3 * v / np.linalg.norm(v)) >= base - 1e-12


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([1.5, 2.0, 3.0]), st.floats(0.1, 10.0), st.integers(0, 1000))
def test_scaling_equivariance(p, c, seed):
    ds = sample(gaussian_spec(3), 80, seed)
    scaled = stack_rows(ds.design, c * ds.response)
    a, b = fit(ds, p).weights, fit(scaled, p).weights
    assert np.allclose(b, c * a, rtol=1e-6, atol=1e-8)


def test_fit_deterministic():
    ds = sample(gaussian_spec(3), 100, 5)
    assert np.array_equal(fit(ds, 1.5).weights, fit(ds, 1.5).weights)


def test_max_iterations_reports_best():
    ds = sample(gaussian_spec(3), 100, 5)
    with pytest.raises(MaxIterations) as info:
        fit(ds, 1.2, SolverOptions(max_iter=1, tol=1e-300))
    assert info.value.best is not None and len(info.value.best.weights) == 3


def test_hessian_anchor():
    ds = sample(gaussian_spec(2), 50, 1)
    sol = fit(ds, 3.0, hessian_at=np.zeros(2))
    assert np.allclose(sol.hessian, empirical_hessian(ds, 3.0, np.zeros(2)))


def test_population_risk_examples():
    spec = gaussian_spec(3)
    est, se = population_risk(spec, 2.0, spec.target_weights, 200_000, 0)
    assert abs(est - 0.5) <= 3 * se
    noiseless = gaussian_spec(2, noise_scale=0.0)
    w = noiseless.target_weights + np.array([1.0, 0.0])
    assert population_risk_p2(noiseless, w) == pytest.approx(0.5)
    heavy = DistributionSpec(StudentTCovariates(3.0, np.eye(2)), np.ones(2))
    with pytest.raises(MomentViolation):
        population_risk(heavy, 4.0, np.ones(2), 1000, 0)


def test_excess_risk_examples():
    spec = gaussian_spec(3)
    est, se = excess_risk(spec, 2.0, spec.target_weights, method="mc")
    assert abs(est) <= 3 * se + 1e-15
    delta = np.array([0.2, -0.1, 0.05])
    exact = 0.5 * delta @ delta
    assert excess_risk(spec, 2.0, spec.target_weights + delta)[0] == pytest.approx(exact)
    est, se = excess_risk(spec, 2.0, spec.target_weights + delta, 200_000, 1, method="mc")
    assert abs(est - exact) <= 3 * se
    est, se = excess_risk(spec, 2.0, spec.target_weights + delta, 200_000, 1, method="mc", control_variate=False)
    assert abs(est - exact) <= 3 * se


def test_excess_risk_inconsistency_flag(monkeypatch):
    import pnorm_erm.erm_solver as es

    monkeypatch.setattr(es, "mean_and_se", lambda v: (-1.0, 0.01))
    spec = gaussian_spec(2)
    with pytest.raises(EstimatorInconsistency):
        es.excess_risk(spec, 3.0, spec.target_weights, 100, 0)
