"""Reference implementations used by the tests.

Each oracle is written independently of the package (plain formulas,
exact rational arithmetic or brute force).  ``FROZEN`` holds values the
oracles produced when the suite was written; the tests check both the
package and the oracles against them, so a drifting oracle is caught too.
"""

from __future__ import annotations

import math
from fractions import Fraction

import mpmath
import numpy as np

FROZEN = {
    # loss and derivatives
    "loss(2,3)": 4.5,
    "loss(3,-2)": 4.0 / 3.0,
    "grad(1.5,4)": 4.0,
    "hess(3,-2)": 2.0,
    "gamma(1.5,1,0.5)": 0.1875,
    "gamma(1.5,1,2)": 2.0 * math.sqrt(2.0) - 0.25,
    "remainder(4,1,1.1)": 0.005341666666666,
    "sandwich_rhs(4,1,1.1)": 0.01 / 24.0,
    # bounds
    "threshold(3,5,0.05)": 8094,
    "threshold(1,1,1)": 740,
    "bound_pgeq2_leading": 0.32768,
    "bound_pgeq2_higher": 1.7179869184,
    "bound_pleq2_leading": 0.16384,
    "bound_pleq2_higher": 83.88608**2 * 2,
    "tail(10,2,0.5)": 0.01953125,
    "sample_size(2,0.02,0.5)": 10,
    "lower_tail(sqrt3,5,0.05,8094)": 0.52586,
    "prop2_eps": 2.0**-10,
    "prop2_tstar": 2.0,
}


def loss(p, t):
    return abs(t) ** p / (p * (p - 1))


def loss_grad(p, t):
    return math.copysign(abs(t) ** (p - 1), t) / (p - 1) if t != 0 else 0.0


def gamma(p, t, x):
    # 50 digits, so t^(p-2) cannot overflow for subnormal t
    with mpmath.workdps(50):
        p, t, x = mpmath.mpf(p), mpmath.mpf(t), mpmath.mpf(x)
        if x <= t:
            return 0.0 if t == 0 else float((p / 2) * t ** (p - 2) * x * x)
        return float(x**p - (1 - p / 2) * t**p)


def taylor_remainder(p, s, t):
    return loss(p, t) - loss(p, s) - loss_grad(p, s) * (t - s)


def normal_equations(x, y):
    return np.linalg.solve(x.T @ x, x.T @ y)


def exact_realizable_tail(n, d, rho):
    """``min(1, C(n, d-1) rho^(n-d+1))`` in rational arithmetic."""
    val = math.comb(n, d - 1) * Fraction(rho) ** (n - d + 1)
    return float(min(Fraction(1), val))


def linear_sample_size(d, delta, rho, n_max=10**6):
    """First ``n >= d`` with tail <= delta, by plain scanning."""
    for n in range(d, n_max):
        if exact_realizable_tail(n, d, rho) <= delta:
            return n
    raise RuntimeError("no sample size found")


def two_atom_failure_probability(n):
    """P(all n rows equal the same atom) for atoms {e1, e2} with probability 1/2 each."""
    return 2.0 * 0.5**n


def sphere_grid(d, count):
    """Deterministic near-uniform points on the unit sphere in dimension 2 or 3."""
    if d == 1:
        return np.array([[1.0]])
    if d == 2:
        ang = np.linspace(0.0, np.pi, count, endpoint=False)
        return np.column_stack([np.cos(ang), np.sin(ang)])
    if d == 3:
        i = np.arange(count) + 0.5
        z = 1 - i / count  # upper hemisphere suffices for even objectives
        r = np.sqrt(1 - z * z)
        phi = np.pi * (1 + 5**0.5) * i
        return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    raise ValueError("grid oracle only covers d <= 3")


def quartic_sphere_max(z_white, count=10_000):
    """``max_u mean <u, z>^4`` over a sphere grid, ``z`` already whitened."""
    u = sphere_grid(z_white.shape[1], count)
    best = 0.0
    for i in range(0, len(u), 500):
        t = z_white @ u[i : i + 500].T
        t *= t
        vals = np.einsum("ij,ij->j", t, t) / len(t)
        best = max(best, float(vals.max()))
    return best


def ols_excess_mean(d, n, noise_var=1.0):
    """Exact ``E[excess risk]`` of least squares with gaussian(I_d) design: ``s^2 d / (2 (n - d - 1))``."""
    return noise_var * d / (2.0 * (n - d - 1))
