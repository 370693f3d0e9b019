"""Monte Carlo estimators for the distribution-dependent constants.

Every quantity for one build is computed from a single sample of ``(X, Y)``
(common random numbers), so identities that hold pathwise, e.g.
``|w|_{L^2,p} = |w|_{H_p}``, hold exactly in the estimates.

Suprema over spheres use projected gradient ascent in whitened coordinates
(``u = L^T w`` with ``H_p = L L^T``) from an orthonormal frame plus random
starts, keeping the best value over restarts.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from pnorm_erm.construction import orthogonal_complement
from pnorm_erm.distributions import (
    DiscreteCovariates,
    DiscreteCoord,
    DistributionSpec,
    ProductCovariates,
    draw_xy,
    moment_exists,
    residual_moment_exists,
)
from pnorm_erm.erm_solver import grad_values, mean_and_se
from pnorm_erm.errors import DomainError, MomentViolation, NonPositiveDefinite
from pnorm_erm.loss_kernel import abs_pow

MAX_COND = 1e12
DEFAULT_MC = 200_000


# --------------------------------------------------------------------------
# sample stream
# --------------------------------------------------------------------------


@dataclass
class Stream:
    """One Monte Carlo sample with the residuals at ``w*``."""

    x: np.ndarray
    y: np.ndarray
    r: np.ndarray
    seed: int

    @classmethod
    def draw(cls, spec: DistributionSpec, mc_samples: int, seed: int):
        x, y = draw_xy(spec, mc_samples, seed)
        return cls(x, y, x @ spec.target_weights - y, seed)

    @property
    def size(self):
        return self.x.shape[0]


def _need_cov(spec, order, what):
    ok = moment_exists(spec, order)
    bad = [k for k, v in ok.items() if k != "y" and not v]
    if bad:
        raise MomentViolation(f"{what}: E|X^j|^{order} is infinite for {', '.join(bad)}")


def _need_res(spec, order, what):
    if not residual_moment_exists(spec, order):
        raise MomentViolation(f"{what}: E|<w*,X> - Y|^{order:g} is infinite")


def curvature_weights(p, r):
    """``|r|**(p-2)``, the diagonal factor in ``grad^2 l_p(<w*,X> - Y)``."""
    if p == 2:
        return np.ones_like(r)
    return abs_pow(r, p - 2.0)


# --------------------------------------------------------------------------
# norms
# --------------------------------------------------------------------------


def lp_norm(spec, w, p, mc_samples=DEFAULT_MC, seed=0, stream=None):
    """``E[|<w, X>|^p]^(1/p)``."""
    _need_cov(spec, p, "L^p norm")
    s = stream or Stream.draw(spec, mc_samples, seed)
    t = s.x @ np.asarray(w, dtype=float)
    return float(np.mean(abs_pow(t, p)) ** (1.0 / p))


def lqp_norm(spec, w, q, p, mc_samples=DEFAULT_MC, seed=0, stream=None):
    """``E[(|r*|^(p-2) <w, X>^2)^(q/2)]^(1/q)``."""
    _need_cov(spec, q, "L^q,p norm")
    if p != 2:
        _need_res(spec, q * (p - 2) / 2, "L^q,p norm")
    s = stream or Stream.draw(spec, mc_samples, seed)
    t = s.x @ np.asarray(w, dtype=float)
    sq = curvature_weights(p, s.r) * t * t
    return float(np.mean(abs_pow(sq, q / 2.0)) ** (1.0 / q))


# --------------------------------------------------------------------------
# Hessian and asymptotic functional
# --------------------------------------------------------------------------


def check_spd(h, what="H_p"):
    eig = np.linalg.eigvalsh(h)
    if eig[0] <= 0 or not np.all(np.isfinite(eig)):
        raise NonPositiveDefinite(f"{what} has a nonpositive eigenvalue ({eig[0]:.3e})")
    if eig[-1] / eig[0] > MAX_COND:
        raise NonPositiveDefinite(f"{what} is ill-conditioned (cond = {eig[-1] / eig[0]:.3e})")
    return h


def _hessian_prereqs(spec, p):
    if spec.realizable and p < 2:
        raise MomentViolation("realizable spec: l''_p is unbounded at every residual for p < 2")
    _need_cov(spec, 2, "H_p")
    _need_res(spec, p - 2, "H_p")
    _need_res(spec, 2 * (p - 1), "V_p")


def hessian_from_stream(p, s: Stream):
    h = (s.x * curvature_weights(p, s.r)[:, None]).T @ s.x / s.size
    return check_spd(0.5 * (h + h.T))


def asymptotic_functional(p, s: Stream, h):
    """Per-sample ``l'_p(r*)^2 X^T H^-1 X``; its mean is ``V_p``."""
    c = np.linalg.cholesky(h)
    xi = scipy.linalg.solve_triangular(c, s.x.T, lower=True)
    return grad_values(p, s.r) ** 2 * np.sum(xi * xi, axis=0)


def hessian_at_minimizer(spec, p, mc_samples=DEFAULT_MC, seed=0, stream=None):
    """``(H_p, V_p)`` estimated on one stream."""
    _hessian_prereqs(spec, p)
    s = stream or Stream.draw(spec, mc_samples, seed)
    h = hessian_from_stream(p, s)
    return h, float(np.mean(asymptotic_functional(p, s, h)))


# --------------------------------------------------------------------------
# sphere maximization
# --------------------------------------------------------------------------


@dataclass
class SphereResult:
    value: float
    point: np.ndarray
    per_restart: list = field(default_factory=list)
    ends: list = field(default_factory=list, repr=False)


def sphere_maximize(fun, d, restarts=32, seed=0, gtol=1e-8, max_iter=20_000, ftol=1e-15, starts=None):
    """Maximize ``fun(u) -> (value, grad)`` over the Euclidean unit sphere.

    Starts: the ``d`` standard basis vectors, then random directions, ``restarts``
    in total (at least ``d``).  Each run does projected gradient ascent with
    a backtracking step, trying the normalized-gradient (infinite step) move
    first.  A run stops at projected gradient norm ``gtol`` (relative to the
    gradient) or once an accepted step gains less than ``ftol`` relatively.
    Explicit ``starts`` replace the default frame-plus-random set.
    """
    if starts is None:
        rng = np.random.default_rng(seed)
        starts = [np.eye(d)[i] for i in range(d)]
        while len(starts) < max(restarts, d):
            v = rng.standard_normal(d)
            starts.append(v / np.linalg.norm(v))
    best = None
    values, ends = [], []
    for u in starts:
        f, g = fun(u)
        for _ in range(max_iter):
            pg = g - (g @ u) * u
            if np.linalg.norm(pg) <= gtol * max(1.0, np.linalg.norm(g)):
                break
            moved, f_prev = False, f
            cand = g / np.linalg.norm(g) if g @ u > 0 else None
            if cand is not None:
                fc, gc = fun(cand)
                if fc > f:
                    u, f, g, moved = cand, fc, gc, True
            if not moved:
                eta = 1.0 / max(np.linalg.norm(pg), 1e-300)
                for _ in range(60):
                    cand = u + eta * pg
                    cand /= np.linalg.norm(cand)
                    fc, gc = fun(cand)
                    if fc > f:
                        u, f, g, moved = cand, fc, gc, True
                        break
                    eta *= 0.5
            if not moved or f - f_prev <= ftol * abs(f):
                break
        values.append(float(f))
        ends.append(u)
        if best is None or f > best.value:
            best = SphereResult(float(f), u.copy())
    best.per_restart = values
    best.ends = ends
    return best


def _whitener(h):
    return np.linalg.cholesky(h)


def fourth_moment_matrix(z, chunk=50_000):
    """``E[(z (x) z)(z (x) z)^T]`` as a ``d^2 x d^2`` matrix."""
    m, d = z.shape
    out = np.zeros((d * d, d * d))
    for i in range(0, m, chunk):
        zc = z[i : i + chunk]
        w = (zc[:, :, None] * zc[:, None, :]).reshape(len(zc), d * d)
        out += w.T @ w
    return out / m


def quartic_objective(m4, d):
    def fun(u):
        uu = np.outer(u, u).ravel()
        mu = (m4 @ uu).reshape(d, d)
        return float(uu @ m4 @ uu), 4.0 * mu @ u

    return fun


def whitened_curvature_vectors(p, s: Stream, h):
    """Rows ``L^-1 Z_i`` with ``Z = |r*|^((p-2)/2) X``; their second moment is ``I``."""
    z = s.x * np.sqrt(curvature_weights(p, s.r))[:, None]
    c = _whitener(h)
    return scipy.linalg.solve_triangular(c, z.T, lower=True).T


def sigma_sq_from_stream(p, s, h, restarts=32, seed=0):
    zt = whitened_curvature_vectors(p, s, h)
    d = zt.shape[1]
    return sphere_maximize(quartic_objective(fourth_moment_matrix(zt), d), d, restarts, seed)


def _pth_moment_objective(xt, p):
    m = xt.shape[0]

    def fun(u):
        t = xt @ u
        a = abs_pow(t, p - 1.0)
        return float(np.mean(a * np.abs(t))), p * (xt.T @ (np.sign(t) * a)) / m

    return fun


def c_lp_from_stream(p, s, h, restarts=32, seed=0, coarse_rows=20_000, polish=3):
    """``sup |w|_{L^p} / |w|_{H_p}``.

    Sample-based objective, so the restarts run on the first ``coarse_rows``
    rows and the ``polish`` best distinct end points are refined on the full
    stream.  ``per_restart`` holds the coarse values.
    """
    c = _whitener(h)
    xt = scipy.linalg.solve_triangular(c, s.x.T, lower=True).T
    d = xt.shape[1]
    coarse = sphere_maximize(
        _pth_moment_objective(xt[:coarse_rows], p), d, restarts, seed, max_iter=500, ftol=1e-10
    )
    ends = []
    for u in coarse.ends:
        if all(abs(u @ v) < 1 - 1e-6 for v in ends):
            ends.append(u)
    ranked = sorted(ends, key=lambda u: -_pth_moment_objective(xt[:coarse_rows], p)(u)[0])[:polish]
    res = sphere_maximize(_pth_moment_objective(xt, p), d, max_iter=300, ftol=1e-12, starts=ranked)
    res.value = res.value ** (1.0 / p)
    res.per_restart = [v ** (1.0 / p) for v in coarse.per_restart]
    return res


def c_l2_quadratic(s, h):
    c = _whitener(h)
    sigma = s.x.T @ s.x / s.size
    sigma = 0.5 * (sigma + sigma.T)
    a = scipy.linalg.solve_triangular(c, scipy.linalg.solve_triangular(c, sigma, lower=True).T, lower=True)
    return sigma, 0.5 * (a + a.T)


def c_l2_from_stream(s, h):
    """Largest generalized eigenvalue of ``(Sigma, H_p)``."""
    sigma, _ = c_l2_quadratic(s, h)
    return float(scipy.linalg.eigh(sigma, h, eigvals_only=True)[-1])


def c_l2_restarts(s, h, restarts=32, seed=0):
    _, a = c_l2_quadratic(s, h)
    return sphere_maximize(lambda u: (float(u @ a @ u), 2.0 * a @ u), a.shape[0], restarts, seed)


def equivalence_constant(spec, p, kind, mc_samples=DEFAULT_MC, seed=0, restarts=32, stream=None):
    """``sigma_p`` (returns sigma_p^2), ``c_lp`` or ``c_l2`` estimated on one stream."""
    _hessian_prereqs(spec, p)
    s = stream or Stream.draw(spec, mc_samples, seed)
    h = hessian_from_stream(p, s)
    if kind == "sigma_p":
        _need_cov(spec, 4, "sigma_p")
        _need_res(spec, 2 * (p - 2), "sigma_p")
        return sigma_sq_from_stream(p, s, h, restarts, seed).value
    if kind == "c_lp":
        _need_cov(spec, p, "c_lp")
        return c_lp_from_stream(p, s, h, restarts, seed).value
    if kind == "c_l2":
        return c_l2_from_stream(s, h)
    raise DomainError(f"unknown constant kind {kind!r}")


# --------------------------------------------------------------------------
# small-ball probabilities
# --------------------------------------------------------------------------


@dataclass
class SmallBallReport:
    rho_sup: float
    rho0_at: list
    rho_q_at: list
    method: str


def discrete_sublaw(spec: DistributionSpec, max_atoms=100_000):
    """Atoms/probabilities of the discrete coordinates and their indices.

    Returns ``(indices, atoms, probs)``; ``indices`` is empty when every
    coordinate is continuous.
    """
    cov = spec.covariates
    if isinstance(cov, DiscreteCovariates):
        keep = cov.probs > 0
        atoms, probs = cov.atoms[keep], cov.probs[keep]
        idx = list(range(cov.dim))
    elif isinstance(cov, ProductCovariates):
        idx = [j for j, c in enumerate(cov.coords) if isinstance(c, DiscreteCoord)]
        coords = [cov.coords[j] for j in idx]
        sizes = [len(c.values) for c in coords]
        if math.prod(sizes) > max_atoms:
            raise DomainError("too many atoms to enumerate")
        atoms, probs = [], []
        for combo in itertools.product(*[range(k) for k in sizes]):
            pr = math.prod(c.probs[i] for c, i in zip(coords, combo))
            if pr > 0:
                atoms.append([c.values[i] for c, i in zip(coords, combo)])
                probs.append(pr)
        atoms = np.asarray(atoms, dtype=float).reshape(len(probs), len(idx))
        probs = np.asarray(probs)
    else:
        idx, atoms, probs = [], np.zeros((1, 0)), np.ones(1)
    if spec.intercept:
        idx = [0] + [j + 1 for j in idx]
        atoms = np.column_stack([np.ones(len(probs)), atoms])
    return idx, atoms, probs


def _zero_mass(atoms, probs, w, rtol=1e-12):
    vals = atoms @ w
    scale = np.abs(atoms) @ np.abs(w)
    return float(probs[np.abs(vals) <= rtol * np.maximum(scale, 1e-300)].sum())


def rho0(spec, w):
    """``P(<w, X> = 0)``, exact."""
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        return 1.0
    idx, atoms, probs = discrete_sublaw(spec)
    cont = np.ones(spec.dim, dtype=bool)
    cont[idx] = False
    if np.any(w[cont] != 0):
        return 0.0
    return _zero_mass(atoms, probs, w[idx])


def rho_sup(spec):
    """``sup_{w != 0} rho0(w)`` by enumerating hyperplanes spanned by atoms."""
    idx, atoms, probs = discrete_sublaw(spec)
    m = len(idx)
    if m == 0:
        return 0.0
    if m == 1:
        return float(probs[atoms[:, 0] == 0].sum())
    best = 0.0
    for sub in itertools.combinations(range(len(probs)), m - 1):
        a = atoms[list(sub)]
        if np.linalg.matrix_rank(a) < m - 1:
            continue
        normal = orthogonal_complement(a)
        best = max(best, _zero_mass(atoms, probs, normal, rtol=1e-9))
    return best


def small_ball(spec, probes=(), kappa=0.5, q=2.0, mc_samples=DEFAULT_MC, seed=0, stream=None):
    idx, _, _ = discrete_sublaw(spec)
    method = "exact-enumeration" if idx else "monte-carlo"
    rho = rho_sup(spec)
    r0 = [(np.asarray(w, dtype=float).tolist(), rho0(spec, w)) for w in probes]
    rq = []
    if probes:
        _need_cov(spec, q, "rho_q")
        s = stream or Stream.draw(spec, mc_samples, seed)
        for w in probes:
            t = s.x @ np.asarray(w, dtype=float)
            norm = float(np.mean(abs_pow(t, q)) ** (1.0 / q))
            rq.append((np.asarray(w, dtype=float).tolist(), kappa, q, float(np.mean(np.abs(t) > kappa * norm))))
    return SmallBallReport(rho, r0, rq, method)


# --------------------------------------------------------------------------
# truncation constants for p in (1, 2)
# --------------------------------------------------------------------------


def prop2_constants(sigma_p, d, c_p_l2, c_star_p, p):
    """``(epsilon, T*)`` with ``epsilon^(p-2) = 8 sigma^(3-p) (d c)^((2-p)/2) sqrt(c*)``
    and ``T* = (d c / (c* (2 - p)))^(1/(6-2p))``.  ``sigma_p`` is the square root of sigma_p^2.
    """
    if not 1 < p < 2:
        raise DomainError(f"truncation constants need p in (1, 2), got {p}")
    if min(sigma_p, d, c_p_l2, c_star_p) <= 0:
        raise DomainError("all inputs must be positive")
    base = 8.0 * sigma_p ** (3.0 - p) * (d * c_p_l2) ** ((2.0 - p) / 2.0) * math.sqrt(c_star_p)
    eps = base ** (1.0 / (p - 2.0))
    t_star = (d * c_p_l2 / (c_star_p * (2.0 - p))) ** (1.0 / (6.0 - 2.0 * p))
    return eps, t_star


# --------------------------------------------------------------------------
# bundle
# --------------------------------------------------------------------------


@dataclass
class ConstantEstimates:
    p: float
    d: int
    H_p: np.ndarray
    V_p: float
    sigma_p_sq: float
    c_p_lp: float | None
    c_p_l2: float
    c_star_p: float | None
    epsilon: float | None
    t_star: float | None
    mc_samples: int
    seed: int
    std_errors: dict = field(default_factory=dict)
    spec_fingerprint: str = ""

    def to_dict(self):
        out = asdict(self)
        out["H_p"] = np.asarray(self.H_p).tolist()
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["H_p"] = np.asarray(d["H_p"], dtype=float)
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def estimate_constants(spec, p, mc_samples=DEFAULT_MC, seed=0, restarts=32):
    """All constants for ``(spec, p)`` from one common stream.

    ``c_p_lp`` is skipped (None) when ``E|X^j|^p`` is infinite; ``c_star_p``,
    ``epsilon`` and ``t_star`` when their moments are missing or ``p`` is
    outside ``(1, 2)`` for the truncation constants.
    """
    _hessian_prereqs(spec, p)
    _need_cov(spec, 4, "sigma_p")
    _need_res(spec, 2 * (p - 2), "sigma_p")
    s = Stream.draw(spec, mc_samples, seed)
    h = hessian_from_stream(p, s)
    v_vals = asymptotic_functional(p, s, h)
    v, v_se = mean_and_se(v_vals)
    sig = sigma_sq_from_stream(p, s, h, restarts, seed).value
    c_lp = c_lp_from_stream(p, s, h, restarts, seed).value if all(
        ok for k, ok in moment_exists(spec, p).items() if k != "y"
    ) else None
    c_l2 = c_l2_from_stream(s, h)
    c_star = c_star_se = None
    if residual_moment_exists(spec, 2 * (p - 2)):
        c_star, c_star_se = mean_and_se(curvature_weights(p, s.r) ** 2)
    eps = t_star = None
    if 1 < p < 2 and c_star is not None:
        eps, t_star = prop2_constants(math.sqrt(sig), spec.dim, c_l2, c_star, p)
    return ConstantEstimates(
        p=float(p),
        d=spec.dim,
        H_p=h,
        V_p=v,
        sigma_p_sq=float(sig),
        c_p_lp=c_lp,
        c_p_l2=c_l2,
        c_star_p=c_star,
        epsilon=eps,
        t_star=t_star,
        mc_samples=int(mc_samples),
        seed=int(seed),
        std_errors={"V_p": v_se, "c_star_p": c_star_se},
        spec_fingerprint=spec.fingerprint(),
    )
