"""Randomized checks of the scalar inequalities behind the loss kernel.

Each suite draws its exponents in groups (one ``p`` per group of
``group`` points) so the kernel functions run vectorized.  A draw counts
as a violation when it fails by more than ``SLACK`` relative to the
larger side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pnorm_erm.loss_kernel import SLACK, check_gamma_upper_pleq2, check_sandwich_pgeq2, gamma


@dataclass
class SuiteResult:
    name: str
    draws: int
    violations: int

    @property
    def ok(self):
        return self.violations == 0


def _scaled_normals(rng, m):
    return rng.standard_normal(m) * rng.uniform(0.01, 100.0, m)


def _leq_count(small, big):
    small = np.asarray(small)
    big = np.asarray(big)
    slack = SLACK * np.maximum(1.0, np.maximum(np.abs(small), np.abs(big)))
    return int(np.sum(small > big + slack))


def sandwich_suite(draws=100_000, seed=0, group=100):
    rng = np.random.default_rng([seed, 1])
    bad = 0
    for _ in range(draws // group):
        p = rng.uniform(2.0, 6.0)
        p = 6.0 if p == 2.0 else p  # the interval is (2, 6]
        s, t = _scaled_normals(rng, group), _scaled_normals(rng, group)
        bad += int(np.sum(~check_sandwich_pgeq2(p, s, t).holds))
    return SuiteResult("sandwich p>=2", draws, bad)


def gamma_upper_suite(draws=100_000, seed=0, group=100):
    rng = np.random.default_rng([seed, 2])
    bad = 0
    for _ in range(draws // group):
        p = rng.uniform(1.05, 1.95)
        s, t = _scaled_normals(rng, group), _scaled_normals(rng, group)
        s[s == 0] = 1.0
        bad += int(np.sum(~check_gamma_upper_pleq2(p, s, t).holds))
    return SuiteResult("gamma upper p<2", draws, bad)


def gamma_scaling_suite(draws=100_000, seed=0, group=100):
    """``gamma(t, lam x) >= min(lam^2, lam^p) gamma(t, x)``, equality at ``lam`` in {0, 1}."""
    rng = np.random.default_rng([seed, 3])
    bad = 0
    for _ in range(draws // group):
        p = rng.uniform(1.05, 1.95)
        t = np.abs(_scaled_normals(rng, group))
        x = np.abs(_scaled_normals(rng, group))
        lam = rng.uniform(0.0, 10.0, group)
        lam[:2] = (0.0, 1.0)
        base = gamma(p, t, x)
        bad += _leq_count(np.minimum(lam**2, lam**p) * base, gamma(p, t, lam * x))
        bad += int(gamma(p, t[0], 0.0) != 0.0) + int(gamma(p, t[1], x[1]) != base[1])
    return SuiteResult("gamma scaling", draws, bad)


def gamma_monotone_suite(draws=100_000, seed=0, group=100):
    """Nonincreasing in ``t``, nondecreasing in ``x``, continuous at ``x = t``."""
    rng = np.random.default_rng([seed, 4])
    bad = 0
    for _ in range(draws // group):
        p = rng.uniform(1.05, 1.95)
        t1, t2 = np.sort(np.abs(np.vstack([_scaled_normals(rng, group), _scaled_normals(rng, group)])), axis=0)
        x1, x2 = np.sort(np.abs(np.vstack([_scaled_normals(rng, group), _scaled_normals(rng, group)])), axis=0)
        bad += _leq_count(gamma(p, t2, x1), gamma(p, t1, x1))
        bad += _leq_count(gamma(p, t1, x1), gamma(p, t1, x2))
        at = gamma(p, t1, t1)
        ref = 0.5 * p * t1**p
        bad += _leq_count(at, ref) + _leq_count(ref, at)
    return SuiteResult("gamma monotone", draws, bad)


def run_scalar_suites(draws=100_000, seed=0):
    return [
        sandwich_suite(draws, seed),
        gamma_upper_suite(draws, seed),
        gamma_scaling_suite(draws, seed),
        gamma_monotone_suite(draws, seed),
    ]
