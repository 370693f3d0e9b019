"""Seeded Monte Carlo campaigns.

Every trial draws its data from a seed derived from ``(master seed, n,
trial)`` so a campaign is a pure function of its configuration.  Trials are
grouped into per-``n`` chunks that may run in worker processes; results are
sorted by ``(n, trial)`` before anything is aggregated or written.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
import scipy.stats

from pnorm_erm import bound_calculator as bc
from pnorm_erm.constants_lab import (
    ConstantEstimates,
    _need_cov,
    Stream,
    curvature_weights,
    estimate_constants,
    small_ball,
)
from pnorm_erm.construction import orthogonal_complement
from pnorm_erm.distributions import DistributionSpec, atomic_write_text, sample, spec_from_dict
from pnorm_erm.erm_solver import (
    SolverOptions,
    empirical_grad,
    empirical_hessian,
    empirical_risk,
    excess_risk,
    fit,
    grad_values,
    hess_values,
    loss_values,
    require_moments,
)
from pnorm_erm.errors import DomainError, EstimatorInconsistency, MaxIterations, NumericalBreakdown, PNormError
from pnorm_erm.loss_kernel import gamma

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "CoverageReport",
    "excess_risk_campaign",
    "realizable_campaign",
    "lower_tail_campaign",
    "curvature_campaign",
    "gamma_lower_campaign",
    "markov_grad_campaign",
    "derivative_check_campaign",
    "orthogonal_complement",
    "trial_seed",
    "binomial_slack",
]

log = logging.getLogger(__name__)

RECOVERY_TOL = 1e-6
CSV_COLUMNS = ("n", "trial", "excess_risk", "excess_se", "grad_norm", "recovered", "seed", "status")


def trial_seed(master, n, trial, stream=0):
    """A 64-bit seed derived from ``(master, n, trial, stream)``."""
    lo, hi = np.random.SeedSequence([int(master), int(n), int(trial), int(stream)]).generate_state(2)
    return int(lo) | (int(hi) << 32)


def binomial_slack(q, trials):
    return 2.0 * math.sqrt(q * (1.0 - q) / trials)


def default_workers():
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def _map_chunks(func, chunks, workers):
    """Run ``func`` over ``chunks``, in order, serially or in a process pool."""
    if workers is None:
        workers = default_workers()
    if workers <= 1 or len(chunks) <= 1:
        return [func(c) for c in chunks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(func, chunks))


def _chunk_trials(n_grid, trials, per_chunk):
    out = []
    for n in n_grid:
        for start in range(0, trials, per_chunk):
            out.append((n, range(start, min(trials, start + per_chunk))))
    return out


# --------------------------------------------------------------------------
# configuration and results
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    spec: DistributionSpec
    p: float
    n_grid: list
    trials: int
    delta: float = 0.1
    seed: int = 0
    constants: ConstantEstimates | None = None
    mc_samples: int = 100_000
    constants_mc: int = 200_000
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        self.n_grid = [int(n) for n in self.n_grid]
        if self.trials < 1:
            raise DomainError("trials must be >= 1")
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise DomainError("n grid must be nonempty and strictly increasing")
        if not 0 < self.delta <= 1:
            raise DomainError(f"delta must lie in (0, 1], got {self.delta}")
        if not self.p > 1:
            raise DomainError(f"p must be > 1, got {self.p}")

    def resolved_constants(self):
        if self.constants is None:
            log.info("estimating constants (p = %g, %d samples)", self.p, self.constants_mc)
            self.constants = estimate_constants(self.spec, self.p, self.constants_mc, self.seed)
        return self.constants

    def to_dict(self):
        return {
            "spec": self.spec.to_dict(),
            "p": self.p,
            "n_grid": list(self.n_grid),
            "trials": self.trials,
            "delta": self.delta,
            "seed": self.seed,
            "mc_samples": self.mc_samples,
            "constants_mc": self.constants_mc,
            "solver": asdict(self.solver),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["spec"] = spec_from_dict(d["spec"])
        if "solver" in d:
            d["solver"] = SolverOptions(**d["solver"])
        if d.get("constants") is not None and not isinstance(d["constants"], ConstantEstimates):
            d["constants"] = ConstantEstimates.from_dict(d["constants"])
        return cls(**d)


@dataclass
class TrialRecord:
    n: int
    trial: int
    excess_risk: float
    excess_se: float
    grad_norm: float
    recovered: bool | None
    seed: int
    status: str = "ok"


@dataclass
class ExperimentResult:
    kind: str
    records: list
    per_n: list
    summary: dict
    config: dict

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            rec = "" if r.recovered is None else int(r.recovered)
            w.writerow([r.n, r.trial, repr(float(r.excess_risk)), repr(float(r.excess_se)),
                        repr(float(r.grad_norm)), rec, r.seed, r.status])
        return buf.getvalue()

    def to_json(self):
        body = {"kind": self.kind, "summary": self.summary, "per_n": self.per_n, "config": self.config}
        return json.dumps(_jsonable(body), indent=2, sort_keys=True)

    def write(self, out_dir, svg=True):
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(os.path.join(out_dir, "trials.csv"), self.to_csv())
        atomic_write_text(os.path.join(out_dir, "summary.json"), self.to_json())
        if svg and len(self.per_n) > 1:
            atomic_write_text(os.path.join(out_dir, "rate.svg"), rate_svg(self.per_n))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class CoverageReport:
    """Violation count of a 1 - q probability statement over independent trials."""

    name: str
    trials: int
    violations: int
    q: float
    details: dict = field(default_factory=dict)

    @property
    def fraction(self):
        return self.violations / self.trials

    @property
    def allowed(self):
        return self.q + binomial_slack(self.q, self.trials)

    @property
    def ok(self):
        return self.fraction <= self.allowed

    def to_dict(self):
        out = asdict(self)
        out.update(fraction=self.fraction, allowed=self.allowed, ok=self.ok)
        return _jsonable(out)


# --------------------------------------------------------------------------
# excess risk campaign
# --------------------------------------------------------------------------


def _h_dual_norm(g, chol):
    z = scipy.linalg.solve_triangular(chol, g, lower=True)
    return float(np.sqrt(z @ z))


def _excess_chunk(job):
    cfg, chol, evaluate, (n, trials) = job
    spec, p = cfg.spec, cfg.p
    w_star = spec.target_weights
    tol = RECOVERY_TOL * max(1.0, float(np.linalg.norm(w_star)))
    out = []
    for t in trials:
        seed = trial_seed(cfg.seed, n, t)
        ds = sample(spec, n, seed)
        rec = TrialRecord(n, t, math.nan, math.nan, math.nan, None, seed)
        try:
            if chol is not None:
                rec.grad_norm = _h_dual_norm(empirical_grad(ds, p, w_star), chol)
            sol = fit(ds, p, cfg.solver)
            if empirical_risk(ds, p, sol.weights) > empirical_risk(ds, p, w_star) + 1e-10:
                rec.status = "erm-suboptimal"
            if spec.realizable:
                rec.recovered = bool(np.linalg.norm(sol.weights - w_star) <= tol)
            if evaluate:
                est, se = excess_risk(spec, p, sol.weights, cfg.mc_samples, trial_seed(cfg.seed, n, t, 1))
                rec.excess_risk, rec.excess_se = est, se
        except MaxIterations as e:
            rec.status = "max-iterations"
            if spec.realizable and e.best is not None:
                rec.recovered = bool(np.linalg.norm(e.best.weights - w_star) <= tol)
        except NumericalBreakdown:
            rec.status = "numerical-breakdown"
        except EstimatorInconsistency:
            rec.status = "estimator-inconsistent"
        out.append(rec)
    return out


def _run_trials(cfg, chol, workers, per_chunk=64, evaluate=True):
    chunks = [(cfg, chol, evaluate, c) for c in _chunk_trials(cfg.n_grid, cfg.trials, per_chunk)]
    recs = [r for part in _map_chunks(_excess_chunk, chunks, workers) for r in part]
    recs.sort(key=lambda r: (r.n, r.trial))
    return recs


def rate_slope(ns, means):
    """Least-squares slope of ``log(mean)`` on ``log(n)`` and its standard error."""
    fit_ = scipy.stats.linregress(np.log(ns), np.log(means))
    return float(fit_.slope), float(fit_.stderr)


def excess_risk_campaign(cfg: ExperimentConfig, workers=None) -> ExperimentResult:
    """Fit ``trials`` datasets per ``n`` and compare excess risks with the bound.

    Coverage (the fraction of trials above the bound) is reported, never
    asserted.  Failed trials are recorded with a status and skipped in the
    aggregates.
    """
    const = cfg.resolved_constants()
    chol = np.linalg.cholesky(const.H_p)
    thr = bc.threshold(const.sigma_p_sq, const.d, cfg.delta)
    if cfg.n_grid[-1] < thr:
        log.warning("largest n = %d is below the threshold %d", cfg.n_grid[-1], thr)
    recs = _run_trials(cfg, chol, workers)

    per_n = []
    for n in cfg.n_grid:
        rows = [r for r in recs if r.n == n and r.status == "ok"]
        ex = np.array([r.excess_risk for r in rows])
        try:
            bound = bc.bound_for(const, n, cfg.delta)
        except PNormError:
            bound = math.nan
        entry = {
            "n": n,
            "ok_trials": len(rows),
            "failed_trials": sum(1 for r in recs if r.n == n) - len(rows),
            "mean_excess": float(ex.mean()) if len(ex) else math.nan,
            "se_excess": float(ex.std(ddof=1) / math.sqrt(len(ex))) if len(ex) > 1 else math.nan,
            "quantile": float(np.quantile(ex, 1 - cfg.delta)) if len(ex) else math.nan,
            "bound": bound,
            "threshold_met": n >= thr,
            "coverage": float(np.mean(ex > bound)) if len(ex) and math.isfinite(bound) else math.nan,
            "eq1_leading": const.V_p / (2 * n),
            "min_z": float(np.min(ex / np.array([max(r.excess_se, 1e-300) for r in rows]))) if len(ex) else math.nan,
        }
        per_n.append(entry)

    ns = [e["n"] for e in per_n if e["mean_excess"] > 0]
    means = [e["mean_excess"] for e in per_n if e["mean_excess"] > 0]
    slope, slope_se = rate_slope(ns, means) if len(ns) >= 2 else (math.nan, math.nan)
    last = per_n[-1]
    summary = {
        "slope": slope,
        "slope_se": slope_se,
        "ratio_at_largest_n": last["mean_excess"] * 2 * last["n"] / const.V_p,
        "threshold": thr,
        "failed_trials": sum(e["failed_trials"] for e in per_n),
        "constants": const.to_dict(),
    }
    return ExperimentResult("excess_risk", recs, per_n, summary, cfg.to_dict())


# --------------------------------------------------------------------------
# realizable recovery
# --------------------------------------------------------------------------


def realizable_campaign(cfg: ExperimentConfig, workers=None, rho=None) -> ExperimentResult:
    """Empirical ``P(w_hat != w*)`` against ``C(n, d-1) rho^(n-d+1)`` for each ``n``.

    ``rho`` defaults to the exact small-ball supremum of the spec.
    """
    spec = cfg.spec
    if not spec.realizable:
        raise DomainError("realizable campaign needs a noiseless spec")
    if rho is None:
        rho = small_ball(spec).rho_sup
    d = spec.dim
    # recovery is decided from the weights alone, so risks are not evaluated
    recs = _run_trials(cfg, None, workers, per_chunk=2500, evaluate=False)
    per_n = []
    for n in cfg.n_grid:
        rows = [r for r in recs if r.n == n]
        fails = sum(1 for r in rows if not r.recovered)
        rate = fails / len(rows)
        tail = bc.realizable_tail(n, d, rho) if n >= d else 1.0
        allowed = tail + binomial_slack(tail, len(rows))
        per_n.append({"n": n, "failures": fails, "failure_rate": rate, "tail_bound": tail,
                      "allowed": allowed, "ok": rate <= allowed})
    n_star, regime = bc.realizable_sample_size(d, cfg.delta, rho)
    summary = {"rho": rho, "n_star": n_star, "regime": regime,
               "all_ok": all(e["ok"] for e in per_n),
               "theorem2_comparison": bc.theorem2_threshold(d, cfg.delta, rho)}
    return ExperimentResult("realizable", recs, per_n, summary, cfg.to_dict())




# --------------------------------------------------------------------------
# coverage campaigns
# --------------------------------------------------------------------------


def _whitened_min_eig(m, chol):
    a = scipy.linalg.solve_triangular(chol, scipy.linalg.solve_triangular(chol, m, lower=True).T, lower=True)
    return float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])


def _curvature_design(spec, p, ds):
    r = ds.design @ spec.target_weights - ds.response
    return ds.design * np.sqrt(curvature_weights(p, r))[:, None]


def lower_tail_campaign(spec, n, delta, trials, sigma, seed=0, p=2.0, whitening=None) -> CoverageReport:
    """Count trials whose smallest whitened eigenvalue drops below ``lower_tail_factor``.

    ``Z = |r*|^((p-2)/2) X``; ``whitening`` is ``E Z Z^T`` (``H_p``) and
    defaults to the exact covariate second moment when ``p == 2``.
    """
    _need_cov(spec, 4.0, "lower tail")
    if whitening is None:
        if p != 2:
            raise DomainError("whitening matrix is required for p != 2")
        whitening = spec.covariate_second_moment()
    chol = np.linalg.cholesky(np.asarray(whitening, dtype=float))
    factor = bc.lower_tail_factor(sigma, spec.dim, delta, n)
    mins = []
    for t in range(trials):
        z = _curvature_design(spec, p, sample(spec, n, trial_seed(seed, n, t)))
        mins.append(_whitened_min_eig(z.T @ z / n, chol))
    mins = np.array(mins)
    return CoverageReport("lower_tail", trials, int(np.sum(mins < factor)), delta,
                          {"factor": factor, "min_eig_min": mins.min(), "min_eig_mean": mins.mean(), "n": n})


def curvature_campaign(spec, p, n, delta, trials, hessian, seed=0) -> CoverageReport:
    """Count trials with ``H_{p,n}(w*) not >= H_p / 2``; allowed rate ``delta / 2``."""
    _need_cov(spec, 4.0, "curvature")
    chol = np.linalg.cholesky(np.asarray(hessian, dtype=float))
    mins = []
    for t in range(trials):
        ds = sample(spec, n, trial_seed(seed, n, t))
        mins.append(_whitened_min_eig(empirical_hessian(ds, p, spec.target_weights), chol))
    mins = np.array(mins)
    return CoverageReport("curvature", trials, int(np.sum(mins < 0.5)), delta / 2,
                          {"min_eig_min": mins.min(), "min_eig_mean": mins.mean(), "n": n})


GAMMA_SCALES = (0.01, 0.1, 1.0, 10.0)


def gamma_lower_check(p, r_star, xd, a, eps):
    """``(lhs, rhs)`` of ``mean gamma_p(|r*|, |<Delta, X>|) >= min(a^2, eps^(2-p) a^p) / 8``."""
    lhs = float(np.mean(gamma(p, np.abs(r_star), np.abs(xd))))
    rhs = min(a * a, eps ** (2.0 - p) * a**p) / 8.0
    return lhs, rhs


def gamma_lower_campaign(spec, p, n, delta, trials, probes, constants, seed=0) -> CoverageReport:
    """Sampled surrogate for the uniform-in-``w`` curvature lower bound when ``p`` is in (1, 2).

    Each trial draws ``probes`` directions on the ``H_p`` unit sphere and
    scales them to ``a = s * epsilon`` for ``s`` in ``GAMMA_SCALES``.
    """
    if not 1 < p < 2:
        raise DomainError("gamma campaign needs p in (1, 2)")
    if constants.epsilon is None:
        raise DomainError("constants carry no truncation level epsilon")
    _need_cov(spec, 4.0, "gamma campaign")
    eps = constants.epsilon
    chol = np.linalg.cholesky(constants.H_p)
    bad_trials, bad_pairs, worst = 0, 0, math.inf
    for t in range(trials):
        s = trial_seed(seed, n, t)
        ds = sample(spec, n, s)
        r_star = ds.design @ spec.target_weights - ds.response
        rng = np.random.default_rng(trial_seed(seed, n, t, 2))
        hit = False
        for _ in range(probes):
            v = rng.standard_normal(spec.dim)
            u = scipy.linalg.solve_triangular(chol.T, v / np.linalg.norm(v), lower=False)
            xu = ds.design @ u
            for scale in GAMMA_SCALES:
                a = scale * eps
                lhs, rhs = gamma_lower_check(p, r_star, a * xu, a, eps)
                worst = min(worst, lhs / rhs)
                if lhs < rhs * (1 - 1e-12):
                    bad_pairs += 1
                    hit = True
        bad_trials += hit
    return CoverageReport("gamma_lower", trials, bad_trials, delta / 2,
                          {"pair_fraction": bad_pairs / (trials * probes * len(GAMMA_SCALES)),
                           "worst_ratio": worst, "epsilon": eps, "n": n})


def markov_grad_campaign(spec, p, n, delta, trials, constants, seed=0) -> CoverageReport:
    """Count trials with ``|grad R_{p,n}(w*)|_{H^-1} > sqrt(2 V / (n delta))``; allowed ``delta / 2``.

    ``details`` also carries ``n E|grad|^2`` against ``V_p`` with its z-score.
    """
    require_moments(spec, 2 * (p - 1), "gradient bound")
    chol = np.linalg.cholesky(constants.H_p)
    bound = bc.markov_grad_bound(constants.V_p, n, delta)
    norms = np.array([
        _h_dual_norm(empirical_grad(sample(spec, n, trial_seed(seed, n, t)), p, spec.target_weights), chol)
        for t in range(trials)
    ])
    sq = n * norms**2
    mean_sq = float(sq.mean())
    se = float(sq.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.nan
    return CoverageReport("markov_grad", trials, int(np.sum(norms > bound)), delta / 2,
                          {"bound": bound, "quantile": float(np.quantile(norms, 1 - delta / 2)),
                           "n_mean_sq": mean_sq, "n_mean_sq_se": se, "V_p": constants.V_p,
                           "z": (mean_sq - constants.V_p) / se if se else math.nan, "n": n})


# --------------------------------------------------------------------------
# derivative checks
# --------------------------------------------------------------------------


@dataclass
class DerivativeCheck:
    weights: list
    grad_rel_err: float
    hess_rel_err: float
    grad_z_max: float


def _fd_grad(risk, w, h):
    d = len(w)
    g = np.empty(d)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        g[j] = (risk(w + e) - risk(w - e)) / (2 * h)
    return g


def _fd_hess(risk, w, h):
    d = len(w)
    hm = np.empty((d, d))
    eye = np.eye(d) * h
    for j in range(d):
        for k in range(j, d):
            ej, ek = eye[j], eye[k]
            v = (risk(w + ej + ek) - risk(w + ej - ek) - risk(w - ej + ek) + risk(w - ej - ek)) / (4 * h * h)
            hm[j, k] = hm[k, j] = v
    return hm


def derivative_check_campaign(spec, p, probes=10, mc_samples=100_000, seed=0, radius=None,
                              h_grad=1e-5, h_hess=1e-4):
    """Compare the sample gradient and Hessian of ``R_p`` with finite differences of the sample risk.

    All quantities use one common Monte Carlo stream.  Probes are ``w*``
    and ``probes - 1`` points at distance ``radius`` from it (``1e-3`` for
    ``p < 2`` so that residuals stay away from the kink, ``0.5`` otherwise).
    Returns a list of DerivativeCheck, ``w*`` first.
    """
    require_moments(spec, p, "derivative check")
    if p < 2:
        require_moments(spec, 2.0, "derivative check")
    radius = radius if radius is not None else (1e-3 if p < 2 else 0.5)
    s = Stream.draw(spec, mc_samples, seed)
    x, y, m = s.x, s.y, s.size
    w_star = spec.target_weights
    rng = np.random.default_rng(trial_seed(seed, 0, 0, 3))
    points = [w_star.copy()]
    while len(points) < probes:
        v = rng.standard_normal(spec.dim)
        points.append(w_star + radius * v / np.linalg.norm(v))

    def risk(w):
        return float(np.mean(loss_values(p, x @ w - y)))

    out = []
    for w in points:
        r = x @ w - y
        per = x * grad_values(p, r)[:, None]
        g = per.mean(axis=0)
        g_se = per.std(axis=0, ddof=1) / math.sqrt(m)
        hm = (x * hess_values(p, r)[:, None]).T @ x / m
        g_fd = _fd_grad(risk, w, h_grad)
        h_fd = _fd_hess(risk, w, h_hess)
        out.append(DerivativeCheck(
            w.tolist(),
            float(np.linalg.norm(g_fd - g) / max(np.linalg.norm(g), 1e-12)),
            float(np.linalg.norm(h_fd - hm) / np.linalg.norm(hm)),
            float(np.max(np.abs(g) / g_se)),
        ))
    return out


# --------------------------------------------------------------------------
# plotting
# --------------------------------------------------------------------------


def rate_svg(per_n, width=480, height=320, pad=48):
    """Static SVG of ``log(mean excess)`` against ``log(n)``, bound dashed when finite."""
    ns = np.log([e["n"] for e in per_n])
    series = {"excess": [e.get("mean_excess", math.nan) for e in per_n],
              "bound": [e.get("bound", math.nan) for e in per_n]}
    ys = {k: np.log(np.where(np.asarray(v, float) > 0, v, np.nan)) for k, v in series.items()}
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()])
    if finite.size == 0:
        finite = np.array([0.0, 1.0])
    y_lo, y_hi = finite.min(), finite.max()
    y_hi = y_hi if y_hi > y_lo else y_lo + 1
    x_lo, x_hi = ns.min(), ns.max() if ns.max() > ns.min() else ns.min() + 1

    def px(a, b):
        return (pad + (a - x_lo) / (x_hi - x_lo) * (width - 2 * pad),
                height - pad - (b - y_lo) / (y_hi - y_lo) * (height - 2 * pad))

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">log n</text>',
             f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">log excess risk</text>']
    for key, style in (("excess", 'stroke="black"'), ("bound", 'stroke="gray" stroke-dasharray="4 3"')):
        pts = [px(a, b) for a, b in zip(ns, ys[key]) if np.isfinite(b)]
        if len(pts) > 1:
            coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            lines.append(f'<polyline fill="none" {style} points="{coords}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
