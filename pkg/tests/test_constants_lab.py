import math

import numpy as np
import pytest

import oracles
from oracles import FROZEN
from pnorm_erm import DomainError, MomentViolation, NonPositiveDefinite
from pnorm_erm.constants_lab import (
    ConstantEstimates,
    Stream,
    c_l2_from_stream,
    c_l2_restarts,
    c_lp_from_stream,
    check_spd,
    equivalence_constant,
    estimate_constants,
    hessian_at_minimizer,
    hessian_from_stream,
    lp_norm,
    lqp_norm,
    prop2_constants,
    rho0,
    sigma_sq_from_stream,
    small_ball,
    whitened_curvature_vectors,
)
from pnorm_erm.distributions import (
    DiscreteCovariates,
    DiscreteCoord,
    DistributionSpec,
    GaussianCovariates,
    NormalCoord,
    ProductCovariates,
    ShiftedStudentTNoise,
    StudentTCovariates,
    gaussian_spec,
)


def two_atoms():
    return DistributionSpec(DiscreteCovariates(np.eye(2), np.array([0.5, 0.5])), np.array([1.0, -2.0]))


def test_norm_examples():
    spec = gaussian_spec(3)
    s = Stream.draw(spec, 100_000, 0)
    val = lp_norm(spec, [1, 0, 0], 2, stream=s)
    assert abs(val - 1) < 0.01
    assert lp_norm(spec, [0, 0, 0], 2, stream=s) == 0.0
    w = np.array([0.3, -1.0, 2.0])
    for q in (1.5, 3.0, 4.0):
        assert lqp_norm(spec, w, q, 2.0, stream=s) == pytest.approx(lp_norm(spec, w, q, stream=s), rel=1e-12)


def test_lp_norm_homogeneous():
    spec = gaussian_spec(2)
    s = Stream.draw(spec, 10_000, 1)
    w = np.array([0.4, -0.7])
    for c in (-3.0, 0.5, 7.0):
        assert lp_norm(spec, c * w, 3.0, stream=s) == pytest.approx(abs(c) * lp_norm(spec, w, 3.0, stream=s), rel=1e-12)


def test_norm_moment_violation():
    heavy = DistributionSpec(StudentTCovariates(3.0, np.eye(2)), np.ones(2))
    with pytest.raises(MomentViolation):
        lp_norm(heavy, [1, 0], 4.0, 100)


def test_gaussian_hessian_and_v():
    spec = gaussian_spec(4, noise_scale=1.5)
    h, v = hessian_at_minimizer(spec, 2.0, 200_000, 0)
    assert np.allclose(h, np.eye(4), atol=0.02)
    assert v == pytest.approx(1.5**2 * 4, rel=0.03)


def test_p2_hessian_is_second_moment_of_stream():
    spec = DistributionSpec(GaussianCovariates(np.array([[2.0, 0.3], [0.3, 1.0]])), np.ones(2), ShiftedStudentTNoise())
    s = Stream.draw(spec, 20_000, 2)
    assert np.allclose(hessian_from_stream(2.0, s), s.x.T @ s.x / s.size, rtol=1e-12)


def test_realizable_low_p_rejected():
    spec = DistributionSpec(GaussianCovariates(np.eye(2)), np.ones(2))
    with pytest.raises(MomentViolation):
        hessian_at_minimizer(spec, 1.5, 1000)


def test_check_spd():
    with pytest.raises(NonPositiveDefinite):
        check_spd(np.diag([1.0, 0.0]))
    with pytest.raises(NonPositiveDefinite):
        check_spd(np.diag([1.0, 1e-13]))
    check_spd(np.eye(2))


def test_sigma_gaussian_is_three():
    assert equivalence_constant(gaussian_spec(3), 2.0, "sigma_p", 1_000_000, 0) == pytest.approx(3.0, rel=0.05)


def test_clp_p2_is_one():
    spec = DistributionSpec(StudentTCovariates(6.0, np.eye(3)), np.ones(3), ShiftedStudentTNoise())
    assert equivalence_constant(spec, 2.0, "c_lp", 100_000, 0) == pytest.approx(1.0, abs=1e-6)


def test_cl2_eigen_matches_restarts():
    spec = gaussian_spec(3)
    s = Stream.draw(spec, 50_000, 3)
    h = hessian_from_stream(3.0, s)
    exact = c_l2_from_stream(s, h)
    assert c_l2_restarts(s, h).value == pytest.approx(exact, rel=1e-6)


@pytest.mark.parametrize("d,p", [(2, 3.0), (3, 2.0), (3, 1.5)])
def test_sigma_matches_grid(d, p):
    spec = DistributionSpec(GaussianCovariates(np.diag(np.arange(1.0, d + 1))), np.ones(d), ShiftedStudentTNoise())
    s = Stream.draw(spec, 40_000, d)
    h = hessian_from_stream(p, s)
    est = sigma_sq_from_stream(p, s, h).value
    grid = oracles.quartic_sphere_max(whitened_curvature_vectors(p, s, h))
    assert grid <= est * (1 + 1e-9)
    assert est == pytest.approx(grid, rel=0.02)


def test_restarts_monotone():
    spec = DistributionSpec(StudentTCovariates(9.0, np.eye(3)), np.ones(3), ShiftedStudentTNoise())
    s = Stream.draw(spec, 20_000, 5)
    h = hessian_from_stream(3.0, s)
    vals = sigma_sq_from_stream(3.0, s, h, restarts=16).per_restart
    running = np.maximum.accumulate(vals)
    assert np.all(np.diff(running) >= 0)


def test_d1_sphere_is_direct_ratio():
    spec = gaussian_spec(1)
    s = Stream.draw(spec, 20_000, 6)
    h = hessian_from_stream(3.0, s)
    direct = math.sqrt(np.mean(np.abs(s.x[:, 0]) ** 3) ** (2 / 3) / h[0, 0])
    assert c_lp_from_stream(3.0, s, h).value == pytest.approx(direct, rel=1e-10)


def test_small_ball_examples():
    rep = small_ball(two_atoms())
    assert rep.rho_sup == 0.5 and rep.method == "exact-enumeration"
    assert rho0(two_atoms(), [1.0, 0.0]) == 0.5
    assert small_ball(gaussian_spec(3)).rho_sup == 0.0
    probe = np.array([1.0, 0.0])
    rep = small_ball(two_atoms(), probes=[probe], kappa=0.0, q=2.0, mc_samples=50_000)
    frac = rep.rho_q_at[0][3]
    assert frac == pytest.approx(1 - rho0(two_atoms(), probe), abs=0.01)


def test_rho0_scale_invariant():
    spec = DistributionSpec(
        DiscreteCovariates(np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]]), np.array([0.4, 0.3, 0.2, 0.1])),
        np.ones(3),
    )
    for w in ([1.0, -1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, 3.0]):
        for c in (-2.0, 0.5, 10.0):
            assert rho0(spec, np.multiply(c, w)) == rho0(spec, w)
    # the plane z = 0 holds e1, e2 and e1 + e2
    assert small_ball(spec).rho_sup == pytest.approx(0.8)


def test_mixed_product_small_ball():
    spec = DistributionSpec(
        ProductCovariates((DiscreteCoord((0.0, 1.0), (0.7, 0.3)), NormalCoord())), np.ones(3), intercept=True
    )
    # the intercept and the binary coordinate are both discrete; w = e_2 vanishes w.p. 0.7
    assert small_ball(spec).rho_sup == pytest.approx(0.7)


def test_prop2_examples():
    eps, t_star = prop2_constants(2.0, 4, 1.0, 1.0, 1.5)
    assert eps == pytest.approx(FROZEN["prop2_eps"], rel=1e-12)
    assert t_star == pytest.approx(FROZEN["prop2_tstar"], rel=1e-12)
    with pytest.raises(DomainError):
        prop2_constants(2.0, 4, 1.0, 1.0, 2.5)


def test_estimate_constants_bundle_round_trip():
    spec = DistributionSpec(GaussianCovariates(np.eye(2)), np.ones(3), ShiftedStudentTNoise(), intercept=True)
    c = estimate_constants(spec, 1.5, 40_000, 0, restarts=8)
    assert c.sigma_p_sq >= 1 and c.c_p_l2 > 0 and c.c_star_p > 0
    eps, t_star = prop2_constants(math.sqrt(c.sigma_p_sq), c.d, c.c_p_l2, c.c_star_p, c.p)
    assert c.epsilon == pytest.approx(eps, rel=1e-12) and c.t_star == pytest.approx(t_star, rel=1e-12)
    back = ConstantEstimates.from_json(c.to_json())
    assert np.array_equal(back.H_p, c.H_p) and back.V_p == c.V_p
    assert back.spec_fingerprint == spec.fingerprint()
