"""Empirical risk minimization and risk evaluation.

The solver is a damped Newton method started from the least-squares
solution.  For ``p < 2`` the residual magnitudes inside ``l''`` are clamped
to ``max(|r|, mu)`` and ``mu`` follows a geometric homotopy schedule
``mu_k = mu0 / factor**k``; for ``p > 2`` a tiny ridge ``1e-12 tr(H) / d``
keeps the Newton system solvable when residuals vanish.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from pnorm_erm.distributions import Dataset, DistributionSpec, draw_xy, moment_exists
from pnorm_erm.errors import (
    DomainError,
    EstimatorInconsistency,
    MaxIterations,
    MomentViolation,
    NumericalBreakdown,
    SingularityError,
)
from pnorm_erm.loss_kernel import abs_pow

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps


# --------------------------------------------------------------------------
# residual-level helpers shared with the estimators
# --------------------------------------------------------------------------


def loss_values(p, r):
    return abs_pow(r, p) / (p * (p - 1.0))


def grad_values(p, r):
    return np.sign(r) * abs_pow(r, p - 1.0) / (p - 1.0)


def hess_values(p, r, mu=None):
    """``|r|**(p-2)``, or ``max(|r|, mu)**(p-2)`` when ``mu`` is given (p < 2)."""
    if p == 2:
        return np.ones_like(r)
    a = np.abs(r)
    if p < 2:
        if mu is not None:
            a = np.maximum(a, mu)
        elif np.any(a == 0):
            raise SingularityError("zero residual: l''_p is unbounded for p < 2")
    return abs_pow(a, p - 2.0)


def weighted_gram(x, weights):
    """``(1/n) sum_i weights_i x_i x_i^T``, symmetrised."""
    h = (x * weights[:, None]).T @ x / x.shape[0]
    return 0.5 * (h + h.T)


# --------------------------------------------------------------------------
# empirical risk
# --------------------------------------------------------------------------


def _xyw(ds, w):
    w = np.asarray(w, dtype=float).ravel()
    if w.shape[0] != ds.d:
        raise DomainError(f"weights have length {w.shape[0]}, dataset has d = {ds.d}")
    return ds.design, ds.response, w


def empirical_risk(ds: Dataset, p: float, w) -> float:
    x, y, w = _xyw(ds, w)
    return float(np.mean(loss_values(p, x @ w - y)))


def empirical_grad(ds: Dataset, p: float, w) -> np.ndarray:
    x, y, w = _xyw(ds, w)
    return x.T @ grad_values(p, x @ w - y) / ds.n


def empirical_hessian(ds: Dataset, p: float, w, mu=None) -> np.ndarray:
    """``H_{p,n}(w)``; raises SingularityError for p < 2 at a zero residual unless smoothed."""
    x, y, w = _xyw(ds, w)
    return weighted_gram(x, hess_values(p, x @ w - y, mu))


def snapped_grad(ds: Dataset, p: float, w) -> np.ndarray:
    """Gradient with residuals below the rounding level of their terms set to zero.

    ``<w, x_i> - y_i`` cannot be resolved below ``~eps (sum_j |w_j x_ij| + |y_i|)``,
    and for ``p < 2`` the gradient of such a residual is dominated by that
    rounding error.
    """
    x, y, w = _xyw(ds, w)
    r = x @ w - y
    scale = np.abs(x) @ np.abs(w) + np.abs(y)
    r = np.where(np.abs(r) <= 8 * EPS * scale, 0.0, r)
    return x.T @ grad_values(p, r) / ds.n


# --------------------------------------------------------------------------
# solver
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverOptions:
    tol: float | None = None  # default 1e-10 * (1 + R(w_init))
    max_iter: int = 200
    mu0: float | None = None  # default: RMS residual at the initial point
    homotopy_factor: float = 4.0
    armijo: float = 1e-4
    max_halvings: int = 60


@dataclass
class ErmSolution:
    weights: np.ndarray
    grad_norm: float
    iterations: int
    converged: bool
    risk: float
    tol: float
    hessian_anchor: np.ndarray | None = None
    hessian: np.ndarray | None = None
    history: list = field(default_factory=list, repr=False)


def _ridge(h, d):
    tr = np.trace(h)
    return h + (1e-12 * tr / d) * np.eye(d) if tr > 0 else h


def _solve(h, g):
    try:
        c = np.linalg.cholesky(h)
        return np.linalg.solve(c.T, np.linalg.solve(c, g))
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(h, g, rcond=None)[0]


def fit(ds: Dataset, p: float, opts: SolverOptions | None = None, hessian_at=None) -> ErmSolution:
    """Minimize the empirical risk ``R_{p,n}``.

    Raises MaxIterations (with the best iterate in ``.best``) when the
    gradient tolerance is not met, NumericalBreakdown on non-finite values.
    """
    if not p > 1:
        raise DomainError(f"p must be > 1, got {p}")
    opts = opts or SolverOptions()
    x, y = ds.design, ds.response
    n, d = x.shape
    if n < d:
        warnings.warn(f"n = {n} < d = {d}: the minimizer is not unique", stacklevel=2)

    w = np.linalg.lstsq(x, y, rcond=None)[0]
    risk = empirical_risk(ds, p, w)
    tol = opts.tol if opts.tol is not None else 1e-10 * (1.0 + risk)
    mu = opts.mu0
    if mu is None:
        mu = float(np.sqrt(np.mean((x @ w - y) ** 2)))
    mu_floor = 1e-12 * mu

    best_w, best_risk = w.copy(), risk
    history = []
    it = 0
    gnorm = np.inf
    while True:
        g_check = snapped_grad(ds, p, w)
        gnorm = float(np.linalg.norm(g_check))
        history.append((it, risk, gnorm))
        if not np.isfinite(gnorm) or not np.isfinite(risk):
            raise NumericalBreakdown(f"non-finite value at iteration {it}")
        if gnorm <= tol:
            break
        if it >= opts.max_iter:
            sol = _solution(ds, p, best_w, best_risk, it, False, tol, hessian_at, history)
            raise MaxIterations(f"no convergence in {opts.max_iter} iterations (|grad| = {gnorm:.3e})", sol)
        it += 1

        r = x @ w - y
        g = x.T @ grad_values(p, r) / n
        if p < 2:
            h = weighted_gram(x, hess_values(p, r, max(mu, mu_floor)))
            mu /= opts.homotopy_factor
        else:
            h = _ridge(weighted_gram(x, hess_values(p, r)), d)
        step = -_solve(h, g)
        slope = float(g @ step)
        if not np.all(np.isfinite(step)):
            raise NumericalBreakdown(f"non-finite Newton step at iteration {it}")
        if slope >= 0:
            # numerically flat; fall back to steepest descent
            step, slope = -g, -float(g @ g)

        t = 1.0
        if -slope <= 64 * EPS * (1.0 + abs(risk)):
            # the predicted decrease is below the rounding level of R_{p,n}, so
            # Armijo cannot discriminate; take the full step if it shrinks the gradient
            cand = w + step
            if np.linalg.norm(snapped_grad(ds, p, cand)) < gnorm:
                w, risk = cand, empirical_risk(ds, p, cand)
                if risk <= best_risk:
                    best_w, best_risk = w.copy(), risk
                continue
        for _ in range(opts.max_halvings):
            cand = w + t * step
            cand_risk = empirical_risk(ds, p, cand)
            if cand_risk <= risk + opts.armijo * t * slope:
                break
            t *= 0.5
        else:
            if p < 2 and mu > mu_floor:
                continue
            log.debug("line search stalled at iteration %d", it)
            sol = _solution(ds, p, best_w, best_risk, it, False, tol, hessian_at, history)
            raise MaxIterations(f"line search stalled at iteration {it} (|grad| = {gnorm:.3e})", sol)
        w, risk = cand, cand_risk
        if risk <= best_risk:
            best_w, best_risk = w.copy(), risk

    return _solution(ds, p, w, risk, it, True, tol, hessian_at, history)


def _solution(ds, p, w, risk, it, converged, tol, hessian_at, history):
    gnorm = float(np.linalg.norm(snapped_grad(ds, p, w)))
    sol = ErmSolution(w, gnorm, it, converged, risk, tol, history=history)
    if hessian_at is not None:
        anchor = np.asarray(hessian_at, dtype=float)
        sol.hessian_anchor = anchor
        sol.hessian = empirical_hessian(ds, p, anchor)
    return sol


# --------------------------------------------------------------------------
# population quantities
# --------------------------------------------------------------------------


def require_moments(spec: DistributionSpec, order: float, what: str = "risk"):
    ok = moment_exists(spec, order)
    bad = [k for k, v in ok.items() if not v]
    if bad:
        raise MomentViolation(f"{what} needs finite moments of order {order} for {', '.join(bad)}")


def mean_and_se(values):
    """Mean with its jackknife standard error (which for a mean is ``s / sqrt(m)``)."""
    v = np.asarray(values, dtype=float)
    m = v.shape[0]
    se = float(np.std(v, ddof=1) / np.sqrt(m)) if m > 1 else float("nan")
    return float(np.mean(v)), se


def population_risk(spec: DistributionSpec, p: float, w, mc_samples: int = 100_000, seed: int = 0):
    """Monte Carlo ``R_p(w)`` as ``(estimate, standard_error)``."""
    require_moments(spec, p)
    x, y = draw_xy(spec, mc_samples, seed)
    return mean_and_se(loss_values(p, x @ np.asarray(w, dtype=float) - y))


def population_risk_p2(spec: DistributionSpec, w) -> float:
    """Closed form ``R_2(w) = (|w - w*|^2_Sigma + E eps^2) / 2`` with ``Sigma = E X X^T``."""
    delta = np.asarray(w, dtype=float) - spec.target_weights
    sigma = spec.covariate_second_moment()
    return 0.5 * (float(delta @ sigma @ delta) + spec.noise.second_moment())


def excess_risk(
    spec: DistributionSpec,
    p: float,
    w,
    mc_samples: int = 100_000,
    seed: int = 0,
    method: str = "auto",
    control_variate: bool = True,
):
    """``R_p(w) - R_p(w*)`` as ``(estimate, standard_error)``.

    Both risks are evaluated on the same sample.  With ``control_variate``
    the term ``<grad l_p(r*), w - w*>`` is subtracted per sample; its mean is
    zero because the population gradient vanishes at ``w*``, and removing it
    leaves a nonnegative per-sample Taylor remainder.  ``method="closed"``
    (or ``"auto"`` with ``p == 2`` and finite second moments) returns
    ``|w - w*|^2_Sigma / 2`` exactly with zero standard error.
    """
    w = np.asarray(w, dtype=float)
    delta = w - spec.target_weights
    if method not in ("auto", "closed", "mc"):
        raise DomainError(f"unknown method {method!r}")
    if method == "closed" or (method == "auto" and p == 2):
        sigma = spec.covariate_second_moment()
        if p != 2:
            raise DomainError("closed form excess risk only exists for p = 2")
        if np.all(np.isfinite(sigma)):
            return 0.5 * float(delta @ sigma @ delta), 0.0
        if method == "closed":
            raise MomentViolation("closed form needs finite second moments")
    require_moments(spec, p)
    x, y = draw_xy(spec, mc_samples, seed)
    r_star = x @ spec.target_weights - y
    shift = x @ delta
    diff = loss_values(p, r_star + shift) - loss_values(p, r_star)
    if control_variate:
        diff = diff - grad_values(p, r_star) * shift
    est, se = mean_and_se(diff)
    if est < -3 * se:
        raise EstimatorInconsistency(f"excess risk estimate {est:.3e} below -3 s.e. ({se:.3e})")
    return est, se
