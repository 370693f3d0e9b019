import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import FROZEN
import oracles
from pnorm_erm import DomainError, LossKernel, SingularityError
from pnorm_erm.loss_kernel import (
    check_gamma_upper_pleq2,
    check_sandwich_pgeq2,
    gamma,
    loss,
    loss_grad,
    loss_hess,
    taylor_remainder,
)

p_any = st.floats(1.01, 8.0)
p_low = st.floats(1.01, 1.99)
reals = st.floats(-1e3, 1e3, allow_nan=False)
nonneg = st.floats(0.0, 1e3)


def test_loss_examples():
    assert loss(2, 3) == FROZEN["loss(2,3)"]
    assert loss(3, -2) == pytest.approx(FROZEN["loss(3,-2)"], rel=1e-15)
    assert loss(1.5, 0) == 0.0


def test_grad_examples():
    assert loss_grad(2, 3) == pytest.approx(3.0)
    assert loss_grad(3, -2) == pytest.approx(-2.0)
    assert loss_grad(1.5, 4) == pytest.approx(FROZEN["grad(1.5,4)"])
    assert loss_grad(1.5, 0.0) == 0.0


def test_hess_examples():
    assert loss_hess(2, -7) == 1.0
    assert loss_hess(3, -2) == pytest.approx(FROZEN["hess(3,-2)"])
    assert loss_hess(3, 0.0) == 0.0
    with pytest.raises(SingularityError):
        loss_hess(1.5, 0.0)


def test_gamma_examples():
    assert gamma(1.5, 0, 0) == 0.0
    assert gamma(1.5, 1, 0.5) == pytest.approx(FROZEN["gamma(1.5,1,0.5)"])
    assert gamma(1.5, 1, 2) == pytest.approx(FROZEN["gamma(1.5,1,2)"], rel=1e-14)
    with pytest.raises(DomainError):
        gamma(1.5, -1, 1)
    with pytest.raises(DomainError):
        gamma(1.5, 1, -1)
    with pytest.raises(DomainError):
        gamma(2.5, 1, 1)


def test_remainder_examples():
    assert taylor_remainder(2, 0, 1) == pytest.approx(0.5)
    assert taylor_remainder(4, 1, 1.1) == pytest.approx(FROZEN["remainder(4,1,1.1)"], abs=1e-7)
    assert taylor_remainder(1.5, 1, 1) == 0.0


def test_sandwich_examples():
    w = check_sandwich_pgeq2(2, 5, 9)
    assert w.holds and w.lhs == pytest.approx(8.0) and w.rhs == pytest.approx(2.0)
    w = check_sandwich_pgeq2(4, 1, 1.1)
    assert w.holds and w.rhs == pytest.approx(FROZEN["sandwich_rhs(4,1,1.1)"], abs=1e-7)
    w = check_sandwich_pgeq2(3, 0, 1)
    assert w.holds and w.rhs == 0.0


def test_gamma_upper_examples():
    w = check_gamma_upper_pleq2(1.5, 1, 1.5)
    assert w.holds and w.gamma == pytest.approx(0.1875) and w.curvature == pytest.approx(0.25)
    w = check_gamma_upper_pleq2(1.5, 1, 3)
    assert w.holds and w.gamma == pytest.approx(2.578427, abs=1e-6) and w.curvature == pytest.approx(4.0)
    w = check_gamma_upper_pleq2(1.5, -2, -2)
    assert w.holds and w.gamma == 0.0 and w.remainder == 0.0
    with pytest.raises(DomainError):
        check_gamma_upper_pleq2(1.5, 0.0, 1.0)


def test_kernel_rejects_p_le_1():
    for p in (1.0, 0.5, -2.0):
        with pytest.raises(DomainError):
            LossKernel(p)
    k = LossKernel(3.0)
    assert k.loss(0.0) == 0.0 and k.grad(2.0) == pytest.approx(2.0)


@given(p_any, reals)
def test_loss_matches_oracle_and_is_even(p, t):
    assert loss(p, t) == pytest.approx(oracles.loss(p, t), rel=1e-12, abs=1e-300)
    assert loss(p, t) == loss(p, -t)
    assert loss(p, t) >= 0


@given(p_any, reals, reals, st.floats(0, 1))
def test_loss_convex(p, a, b, lam):
    mid = lam * a + (1 - lam) * b
    lhs = loss(p, mid)
    rhs = lam * loss(p, a) + (1 - lam) * loss(p, b)
    assert lhs <= rhs + 1e-12 * max(1.0, abs(rhs))


@given(p_any, st.floats(1e-3, 1e2), st.booleans())
def test_grad_matches_central_difference(p, t, neg):
    t = -t if neg else t
    h = 1e-6 * max(1.0, abs(t))
    fd = (loss(p, t + h) - loss(p, t - h)) / (2 * h)
    g = loss_grad(p, t)
    assert abs(fd - g) <= 1e-6 * max(abs(g), 1e-12) + 1e-9


@given(p_low, nonneg, nonneg)
def test_gamma_matches_oracle(p, t, x):
    assert gamma(p, t, x) == pytest.approx(oracles.gamma(p, t, x), rel=1e-12, abs=1e-300)


@given(p_low, st.floats(1e-6, 1e3))
def test_gamma_continuous_at_branch(p, t):
    assert gamma(p, t, t) == pytest.approx(t**p - (1 - p / 2) * t**p, rel=1e-12)
    assert gamma(p, t, t) == pytest.approx((p / 2) * t**p, rel=1e-12)


@given(p_low, nonneg, nonneg, st.floats(0, 50))
def test_gamma_scaling(p, t, x, lam):
    lhs = gamma(p, t, lam * x)
    rhs = min(lam**2, lam**p) * gamma(p, t, x)
    assert lhs >= rhs - 1e-12 * max(1.0, abs(lhs), abs(rhs))


@given(p_low, nonneg, nonneg, nonneg)
def test_gamma_monotone(p, t, x1, x2):
    lo, hi = sorted((x1, x2))
    assert gamma(p, t, lo) <= gamma(p, t, hi) * (1 + 1e-12) + 1e-300
    assert gamma(p, lo, t) >= gamma(p, hi, t) * (1 - 1e-12)


@settings(max_examples=300)
@given(st.floats(2.0, 6.0), reals, reals)
def test_sandwich_property(p, s, t):
    assert check_sandwich_pgeq2(p, s, t).holds


@settings(max_examples=300)
@given(p_low, reals.filter(lambda s: s != 0), reals)
def test_gamma_upper_property(p, s, t):
    assert check_gamma_upper_pleq2(p, s, t).holds


def test_checkers_vectorize():
    rng = np.random.default_rng(0)
    s, t = rng.standard_normal(1000), rng.standard_normal(1000)
    assert np.all(check_sandwich_pgeq2(3.0, s, t).holds)
    assert np.all(check_gamma_upper_pleq2(1.3, s, t).holds)
    assert math.isfinite(float(np.sum(taylor_remainder(1.3, s, t))))
