"""Scalar p-th power loss, its derivatives and the gamma approximation.

All functions accept Python floats or numpy arrays and broadcast; scalar
inputs give scalar outputs.  The loss is normalised as
``|t|**p / (p * (p - 1))`` so that its second derivative is ``|t|**(p-2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from pnorm_erm.errors import DomainError, SingularityError

#: relative slack absorbed by the inequality checkers
SLACK = 1e-12


def _check_p(p):
    if not p > 1:
        raise DomainError(f"exponent p must be > 1, got {p}")


def _out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


def abs_pow(t, a):
    """``|t|**a`` with ``0 -> 0`` for ``a > 0``, ``inf`` for ``a < 0`` and 1 for ``a == 0``.

    Zero is short-circuited so no log or division of zero is ever evaluated.
    """
    t = np.abs(np.asarray(t, dtype=float))
    zero = t == 0.0
    val = np.power(np.where(zero, 1.0, t), a)
    if a > 0:
        val = np.where(zero, 0.0, val)
    elif a < 0:
        val = np.where(zero, np.inf, val)
    return val


def loss(p, t):
    _check_p(p)
    return _out(abs_pow(t, p) / (p * (p - 1.0)))


def loss_grad(p, t):
    _check_p(p)
    t = np.asarray(t, dtype=float)
    return _out(np.sign(t) * abs_pow(t, p - 1.0) / (p - 1.0))


def loss_hess(p, t):
    """Second derivative ``|t|**(p-2)``.

    Raises SingularityError for ``p < 2`` at ``t == 0``; callers that need a
    total function clamp ``|t|`` away from zero themselves.
    """
    _check_p(p)
    t = np.asarray(t, dtype=float)
    if p == 2:
        return _out(np.ones_like(t))
    if p < 2 and np.any(t == 0.0):
        raise SingularityError(f"l''_p is unbounded at t = 0 for p = {p} < 2")
    return _out(abs_pow(t, p - 2.0))


def gamma(p, t, x):
    """Quadratic/power approximation to ``x**p`` with threshold ``t`` (p in (1, 2))."""
    if not 1 < p < 2:
        raise DomainError(f"gamma is defined for p in (1, 2), got {p}")
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(t < 0) or np.any(x < 0):
        raise DomainError("gamma requires t >= 0 and x >= 0")
    t, x = np.broadcast_arrays(t, x)
    quad = x <= t
    # written as t^p (x/t)^2 so tiny t cannot overflow t^(p-2); x <= t with t == 0 forces x == 0
    tq = np.where(quad & (t > 0), t, 1.0)
    val_quad = np.where(t > 0, 0.5 * p * abs_pow(tq, p) * np.square(np.where(quad, x, 0.0) / tq), 0.0)
    val_pow = abs_pow(x, p) - (1.0 - 0.5 * p) * abs_pow(t, p)
    return _out(np.where(quad, val_quad, val_pow))


def taylor_remainder(p, s, t):
    """``loss(t) - loss(s) - loss'(s) (t - s)``."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    return _out(loss(p, t) - loss(p, s) - loss_grad(p, s) * (t - s))


class Witness(NamedTuple):
    """Outcome of ``lhs >= rhs`` (or ``<=``) with both sides kept for reporting."""

    holds: bool | np.ndarray
    lhs: float | np.ndarray
    rhs: float | np.ndarray


def _geq(lhs, rhs):
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    slack = SLACK * np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    ok = lhs >= rhs - slack
    return Witness(ok if ok.ndim else bool(ok), _out(lhs), _out(rhs))


def check_sandwich_pgeq2(p, s, t) -> Witness:
    """Quadratic lower bound on the Taylor remainder for p >= 2.

    Checks ``remainder(s, t) >= l''(s) (t - s)**2 / (8 (p - 1))``.
    """
    if p < 2:
        raise DomainError(f"sandwich check needs p >= 2, got {p}")
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    lhs = taylor_remainder(p, s, t)
    rhs = loss_hess(p, s) * (t - s) ** 2 / (8.0 * (p - 1.0))
    return _geq(lhs, rhs)


class GammaWitness(NamedTuple):
    holds: bool | np.ndarray
    gamma: float | np.ndarray
    curvature: float | np.ndarray
    remainder: float | np.ndarray
    remainder_bound: float | np.ndarray


def check_gamma_upper_pleq2(p, s, t) -> GammaWitness:
    """Upper bounds for p in (1, 2) at a nonzero anchor ``s``.

    Verifies ``gamma(|s|, |t-s|) <= l''(s) (t-s)**2`` and
    ``remainder(s, t) <= 4 gamma(|s|, |t-s|) / (p (p - 1))``.
    """
    if not 1 < p < 2:
        raise DomainError(f"gamma upper check needs p in (1, 2), got {p}")
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s == 0):
        raise DomainError("anchor s must be nonzero")
    g = np.asarray(gamma(p, np.abs(s), np.abs(t - s)))
    # |s|^(p-2) (t-s)^2 in log space: for tiny anchors the direct product is inf * 0
    gap = np.abs(t - s)
    with np.errstate(divide="ignore", over="ignore"):
        curv = np.where(gap > 0, np.exp((p - 2.0) * np.log(np.abs(s)) + 2.0 * np.log(np.where(gap > 0, gap, 1.0))), 0.0)
    rem = np.asarray(taylor_remainder(p, s, t))
    rem_bound = 4.0 * g / (p * (p - 1.0))
    first = _geq(curv, g).holds
    second = _geq(rem_bound, rem).holds
    holds = np.logical_and(first, second)
    return GammaWitness(
        holds if np.ndim(holds) else bool(holds), _out(g), _out(curv), _out(rem), _out(rem_bound)
    )


@dataclass(frozen=True)
class LossKernel:
    """The loss for a fixed exponent ``p > 1``."""

    p: float

    def __post_init__(self):
        _check_p(self.p)

    def loss(self, t):
        return loss(self.p, t)

    def grad(self, t):
        return loss_grad(self.p, t)

    def hess(self, t):
        return loss_hess(self.p, t)

    def gamma(self, t, x):
        return gamma(self.p, t, x)

    def remainder(self, s, t):
        return taylor_remainder(self.p, s, t)
