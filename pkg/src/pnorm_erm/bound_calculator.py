"""Closed-form excess risk bounds, sample-size thresholds and tail factors."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

from scipy.special import gammaln

from pnorm_erm.errors import DomainError

REGIMES = (
    "0 <= rho < exp(-1)",
    "exp(-1) <= rho < exp(-1/e)",
    "exp(-1/e) <= rho < 1",
)


class Terms(NamedTuple):
    """A bound split into its Theta(1/n) leading term and an o(1/n) remainder."""

    total: float
    leading: float
    higher_order: float


def _check_delta(delta):
    if not 0 < delta <= 1:
        raise DomainError(f"confidence delta must lie in (0, 1], got {delta}")


def threshold(sigma_sq, d, delta):
    """Smallest admissible sample size ``ceil(196 sigma^2 (d + 2 log(4/delta)))``.

    The same shape serves every non-realizable case; only ``sigma_sq`` changes.
    """
    _check_delta(delta)
    if d < 1:
        raise DomainError("d must be >= 1")
    if sigma_sq < 1:
        raise DomainError(f"sigma^2 must be >= 1, got {sigma_sq}")
    return math.ceil(196.0 * sigma_sq * (d + 2.0 * math.log(4.0 / delta)))


def bound_p2(V, n, delta):
    """``16 V / (n delta)`` for the square loss."""
    _check_delta(delta)
    if n < 1 or V < 0:
        raise DomainError("need n >= 1 and V >= 0")
    return 16.0 * V / (n * delta)


def bound_pgeq2(V, n, delta, p, c_lp) -> Terms:
    """``2048 p^2 V/(n delta) + (512 p^4 c^2 V/(n delta))^(p/2)`` for p > 2."""
    if not p > 2:
        raise DomainError(f"this bound needs p > 2, got {p}")
    _check_delta(delta)
    if n < 1 or V < 0 or c_lp <= 0:
        raise DomainError("need n >= 1, V >= 0 and c_p > 0")
    base = V / (n * delta)
    lead = 2048.0 * p**2 * base
    high = (512.0 * p**4 * c_lp**2 * base) ** (p / 2.0)
    return Terms(lead + high, lead, high)


def bound_pleq2(V, n, delta, p, sigma_p, d, c_l2, c_star) -> Terms:
    """Bound for p in (1, 2).  ``sigma_p`` is the square root of sigma_p^2."""
    if not 1 < p < 2:
        raise DomainError(f"this bound needs p in (1, 2), got {p}")
    _check_delta(delta)
    if n < 1 or V < 0 or min(sigma_p, d, c_l2, c_star) <= 0:
        raise DomainError("need n >= 1, V >= 0 and positive constants")
    base = V / (n * delta)
    lead = 8192.0 / (p - 1.0) * base
    inner = 524288.0 * base * sigma_p ** (6 - 2 * p) * d ** (2 - p) * c_l2 ** (2 - p) * c_star
    high = inner ** (1.0 / (p - 1.0)) / (p - 1.0)
    return Terms(lead + high, lead, high)


def log_realizable_tail(n, d, rho):
    if not 0 <= rho < 1:
        raise DomainError(f"rho must lie in [0, 1), got {rho}")
    if d < 1 or n < d:
        raise DomainError(f"need n >= d >= 1, got n = {n}, d = {d}")
    if rho == 0:
        return -math.inf
    log_binom = gammaln(n + 1) - gammaln(d) - gammaln(n - d + 2)
    return float(log_binom + (n - d + 1) * math.log(rho))


def realizable_tail(n, d, rho):
    """``min(1, C(n, d-1) rho^(n-d+1))``.

    Computed in log space; for ``n <= 1000`` the direct product is used
    instead when it is representable, which keeps exact dyadic cases exact.
    """
    log_tail = log_realizable_tail(n, d, rho)
    if n <= 1000 and log_tail > -700:
        return min(1.0, float(math.comb(n, d - 1)) * rho ** (n - d + 1))
    return min(1.0, math.exp(log_tail))


def rho_regime(rho):
    if not 0 <= rho < 1:
        raise DomainError(f"rho must lie in [0, 1), got {rho}")
    if rho < math.exp(-1):
        return REGIMES[0]
    if rho < math.exp(-1 / math.e):
        return REGIMES[1]
    return REGIMES[2]


def realizable_sample_size(d, delta, rho):
    """Minimal ``n >= d`` with ``realizable_tail(n, d, rho) <= delta``, and the rho regime.

    The tail is nonincreasing from ``n0 = ceil(d max(2, 1/(1-rho)))`` on, so
    values up to ``n0`` are scanned and the rest is found by doubling and
    bisection.
    """
    _check_delta(delta)
    label = rho_regime(rho)
    log_delta = math.log(delta)

    def ok(n):
        return log_realizable_tail(n, d, rho) <= log_delta

    n0 = math.ceil(d * max(2.0, 1.0 / (1.0 - rho)))
    for n in range(d, n0 + 1):
        if ok(n):
            return n, label
    lo, hi = n0, 2 * n0
    while not ok(hi):
        lo, hi = hi, 2 * hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi, label


def theorem2_threshold(d, delta, rho):
    """Comparison column ``(d + log(1/delta)) / (1 - rho)^2`` with constant 1."""
    _check_delta(delta)
    return (d + math.log(1.0 / delta)) / (1.0 - rho) ** 2


def lower_tail_factor(sigma, d, delta, n):
    """``1 - 7 sigma sqrt((d + 2 log(2/delta)) / n)``; nonpositive values are vacuous."""
    _check_delta(delta)
    if sigma <= 0 or d < 1 or n <= 0:
        raise DomainError("sigma, d and n must be positive")
    return 1.0 - 7.0 * sigma * math.sqrt((d + 2.0 * math.log(2.0 / delta)) / n)


def markov_grad_bound(V, n, delta):
    """``sqrt(2 V / (n delta))``: the 1 - delta/2 bound on the gradient dual norm at w*."""
    _check_delta(delta)
    if V < 0 or n <= 0:
        raise DomainError("need V >= 0 and n > 0")
    return math.sqrt(2.0 * V / (n * delta))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class BoundReport:
    theorem: str
    p: float
    d: int
    n: int
    delta: float
    threshold_n: int
    threshold_met: bool
    bound_value: float
    leading: float
    higher_order: float
    constants: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self):
        row = asdict(self)
        consts = row.pop("constants")
        for k in sorted(consts):
            row[f"const_{k}"] = consts[k]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def bound_report(theorem, n, delta, constants) -> BoundReport:
    """Evaluate theorem ``"1"``, ``"4"`` or ``"5"`` from a ConstantEstimates-like object."""
    c = constants
    p, d = c.p, c.d
    thr = threshold(c.sigma_p_sq, d, delta)
    snap = {"V_p": c.V_p, "sigma_p_sq": c.sigma_p_sq}
    if theorem == "1":
        if p != 2:
            raise DomainError("theorem 1 is the p = 2 case")
        val = bound_p2(c.V_p, n, delta)
        terms = Terms(val, val, 0.0)
    elif theorem == "4":
        terms = bound_pgeq2(c.V_p, n, delta, p, c.c_p_lp)
        snap["c_p_lp"] = c.c_p_lp
    elif theorem == "5":
        terms = bound_pleq2(c.V_p, n, delta, p, math.sqrt(c.sigma_p_sq), d, c.c_p_l2, c.c_star_p)
        snap.update(c_p_l2=c.c_p_l2, c_star_p=c.c_star_p)
    else:
        raise DomainError(f"no closed-form excess risk bound for theorem {theorem!r}")
    return BoundReport(theorem, p, d, int(n), delta, thr, n >= thr, terms.total, terms.leading, terms.higher_order, snap)


def bound_for(constants, n, delta) -> float:
    """The applicable excess risk bound value for ``constants.p``."""
    p = constants.p
    theorem = "1" if p == 2 else ("4" if p > 2 else "5")
    return bound_report(theorem, n, delta, constants).bound_value
