"""Generative models for (X, Y), dataset sampling and CSV persistence.

A :class:`DistributionSpec` combines a covariate family, an optional
intercept, target weights ``w*`` and a symmetric noise family independent of
``X``.  Because the noise is symmetric and independent, ``w*`` is the
population risk minimizer for every exponent.

Sampling is block-keyed: block ``b`` of ``BLOCK`` rows is drawn from a Philox
stream keyed by ``(seed, b)``, so datasets of different sizes drawn with the
same seed share their common prefix.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from pnorm_erm.errors import DomainError, ParseError

BLOCK = 256


# --------------------------------------------------------------------------
# per-coordinate families (for product covariates)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalCoord:
    scale: float = 1.0
    kind = "normal"

    def draw(self, rng, m):
        return self.scale * rng.standard_normal(m)

    def moment(self, order):
        return True

    def mean(self):
        return 0.0

    def second_moment(self):
        return self.scale**2

    def is_continuous(self):
        return True

    def to_dict(self):
        return {"family": "normal", "scale": self.scale}


@dataclass(frozen=True)
class StudentTCoord:
    df: float
    scale: float = 1.0
    kind = "student_t"

    def __post_init__(self):
        if not self.df > 0:
            raise DomainError(f"student_t degrees of freedom must be > 0, got {self.df}")

    def draw(self, rng, m):
        return self.scale * rng.standard_t(self.df, m)

    def moment(self, order):
        return order < self.df

    def mean(self):
        return 0.0

    def second_moment(self):
        if self.df <= 2:
            return math.inf
        return self.scale**2 * self.df / (self.df - 2)

    def is_continuous(self):
        return True

    def to_dict(self):
        return {"family": "student_t", "df": self.df, "scale": self.scale}


@dataclass(frozen=True)
class DiscreteCoord:
    values: tuple
    probs: tuple
    kind = "discrete"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "probs", tuple(float(q) for q in self.probs))
        _check_probs(self.probs, len(self.values))

    def draw(self, rng, m):
        idx = rng.choice(len(self.values), size=m, p=np.asarray(self.probs))
        return np.asarray(self.values)[idx]

    def moment(self, order):
        return True

    def mean(self):
        return float(np.dot(self.values, self.probs))

    def second_moment(self):
        return float(np.dot(np.square(self.values), self.probs))

    def is_continuous(self):
        return False

    def to_dict(self):
        return {"family": "discrete", "values": list(self.values), "probs": list(self.probs)}


def _check_probs(probs, k):
    if len(probs) != k or k == 0:
        raise DomainError("need one probability per atom")
    if any(q < 0 for q in probs):
        raise DomainError("atom probabilities must be nonnegative")
    if abs(sum(probs) - 1.0) > 1e-12:
        raise DomainError(f"atom probabilities sum to {sum(probs)!r}, not 1")


# --------------------------------------------------------------------------
# covariate families
# --------------------------------------------------------------------------


def _check_spd(cov):
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DomainError("covariance must be a square matrix")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise DomainError("covariance must be symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DomainError("covariance must be positive definite") from None
    return cov


@dataclass(frozen=True, eq=False)
class GaussianCovariates:
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cov", _check_spd(self.cov))
        object.__setattr__(self, "_chol", np.linalg.cholesky(self.cov))

    @property
    def dim(self):
        return self.cov.shape[0]

    def draw(self, rng, m):
        return rng.standard_normal((m, self.dim)) @ self._chol.T

    def moments(self, order):
        return [True] * self.dim

    def mean(self):
        return np.zeros(self.dim)

    def second_moment(self):
        return self.cov.copy()

    def continuous_mask(self):
        return [True] * self.dim

    def to_dict(self):
        return {"family": "gaussian", "cov": self.cov.tolist()}


@dataclass(frozen=True, eq=False)
class StudentTCovariates:
    """Multivariate t: ``L z / sqrt(chi2_df / df)`` with ``L L^T = scale``."""

    df: float
    scale: np.ndarray

    def __post_init__(self):
        if not self.df > 0:
            raise DomainError(f"student_t degrees of freedom must be > 0, got {self.df}")
        object.__setattr__(self, "scale", _check_spd(self.scale))
        object.__setattr__(self, "_chol", np.linalg.cholesky(self.scale))

    @property
    def dim(self):
        return self.scale.shape[0]

    def draw(self, rng, m):
        z = rng.standard_normal((m, self.dim)) @ self._chol.T
        g = rng.chisquare(self.df, m)
        return z / np.sqrt(g / self.df)[:, None]

    def moments(self, order):
        return [order < self.df] * self.dim

    def mean(self):
        return np.zeros(self.dim)

    def second_moment(self):
        if self.df <= 2:
            return np.full((self.dim, self.dim), np.inf)
        return self.scale * self.df / (self.df - 2)

    def continuous_mask(self):
        return [True] * self.dim

    def to_dict(self):
        return {"family": "student_t", "df": self.df, "scale": self.scale.tolist()}


@dataclass(frozen=True, eq=False)
class DiscreteCovariates:
    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        probs = np.asarray(self.probs, dtype=float)
        _check_probs(list(probs), atoms.shape[0])
        support = atoms[probs > 0]
        if np.linalg.matrix_rank(support) < atoms.shape[1]:
            raise DomainError("atoms lie in a hyperplane: the covariate law is degenerate")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)

    @property
    def dim(self):
        return self.atoms.shape[1]

    def draw(self, rng, m):
        return self.atoms[rng.choice(len(self.probs), size=m, p=self.probs)]

    def moments(self, order):
        return [True] * self.dim

    def mean(self):
        return self.probs @ self.atoms

    def second_moment(self):
        return (self.atoms * self.probs[:, None]).T @ self.atoms

    def continuous_mask(self):
        return [False] * self.dim

    def to_dict(self):
        return {"family": "discrete", "atoms": self.atoms.tolist(), "probs": self.probs.tolist()}


@dataclass(frozen=True)
class ProductCovariates:
    """Independent coordinates, each with its own one-dimensional family."""

    coords: tuple

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(self.coords))
        if not self.coords:
            raise DomainError("product covariates need at least one coordinate")
        for c in self.coords:
            if isinstance(c, DiscreteCoord) and all(v == 0 for v, q in zip(c.values, c.probs) if q > 0):
                raise DomainError("a coordinate that is identically zero makes X degenerate")

    @property
    def dim(self):
        return len(self.coords)

    def draw(self, rng, m):
        return np.column_stack([c.draw(rng, m) for c in self.coords])

    def moments(self, order):
        return [c.moment(order) for c in self.coords]

    def mean(self):
        return np.array([c.mean() for c in self.coords])

    def second_moment(self):
        mu = self.mean()
        out = np.outer(mu, mu)
        for j, c in enumerate(self.coords):
            out[j, j] = c.second_moment()
        return out

    def continuous_mask(self):
        return [c.is_continuous() for c in self.coords]

    def to_dict(self):
        return {"family": "product", "coords": [c.to_dict() for c in self.coords]}


# --------------------------------------------------------------------------
# noise families (all symmetric about zero, independent of X)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoNoise:
    def draw(self, rng, m):
        return np.zeros(m)

    def moment(self, order):
        # order <= 0 would need E|0|^order
        return order > 0

    def second_moment(self):
        return 0.0

    def to_dict(self):
        return {"family": "none"}


@dataclass(frozen=True)
class GaussianNoise:
    scale: float = 1.0

    def draw(self, rng, m):
        return self.scale * rng.standard_normal(m)

    def moment(self, order):
        # density positive at 0: negative moments exist only above -1
        return order > -1

    def second_moment(self):
        return self.scale**2

    def to_dict(self):
        return {"family": "gaussian", "scale": self.scale}


@dataclass(frozen=True)
class StudentTNoise:
    df: float
    scale: float = 1.0

    def __post_init__(self):
        if not self.df > 0:
            raise DomainError(f"student_t degrees of freedom must be > 0, got {self.df}")

    def draw(self, rng, m):
        return self.scale * rng.standard_t(self.df, m)

    def moment(self, order):
        return -1 < order < self.df

    def second_moment(self):
        return math.inf if self.df <= 2 else self.scale**2 * self.df / (self.df - 2)

    def to_dict(self):
        return {"family": "student_t", "df": self.df, "scale": self.scale}


@dataclass(frozen=True)
class LaplaceNoise:
    scale: float = 1.0

    def draw(self, rng, m):
        return rng.laplace(0.0, self.scale, m)

    def moment(self, order):
        return order > -1

    def second_moment(self):
        return 2.0 * self.scale**2

    def to_dict(self):
        return {"family": "laplace", "scale": self.scale}


@dataclass(frozen=True)
class ShiftedStudentTNoise:
    """Random sign times ``shift + scale |t_df|``: symmetric and bounded away from 0."""

    df: float = 3.0
    shift: float = 0.1
    scale: float = 1.0

    def __post_init__(self):
        if not self.df > 0:
            raise DomainError(f"student_t degrees of freedom must be > 0, got {self.df}")
        if not self.shift > 0:
            raise DomainError("shift must be positive")

    def draw(self, rng, m):
        mag = self.shift + self.scale * np.abs(rng.standard_t(self.df, m))
        sign = np.where(rng.random(m) < 0.5, -1.0, 1.0)
        return sign * mag

    def moment(self, order):
        return order < self.df

    def second_moment(self):
        if self.df <= 2:
            return math.inf
        # E(a + b|T|)^2 with E|T| for Student t
        df = self.df
        e_abs = 2.0 * math.sqrt(df) * math.gamma((df + 1) / 2) / (
            math.sqrt(math.pi) * (df - 1) * math.gamma(df / 2)
        )
        return self.shift**2 + 2 * self.shift * self.scale * e_abs + self.scale**2 * df / (df - 2)

    def to_dict(self):
        return {"family": "shifted_student_t", "df": self.df, "shift": self.shift, "scale": self.scale}


# --------------------------------------------------------------------------
# the spec
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DistributionSpec:
    covariates: Any
    target_weights: np.ndarray
    noise: Any = field(default_factory=NoNoise)
    intercept: bool = False

    def __post_init__(self):
        w = np.asarray(self.target_weights, dtype=float).ravel()
        if w.shape[0] != self.dim:
            raise DomainError(f"target weights have length {w.shape[0]}, expected {self.dim}")
        object.__setattr__(self, "target_weights", w)

    @property
    def dim(self):
        return self.covariates.dim + int(self.intercept)

    @property
    def realizable(self):
        return isinstance(self.noise, NoNoise)

    def draw_covariates(self, rng, m):
        x = self.covariates.draw(rng, m)
        if self.intercept:
            x = np.column_stack([np.ones(m), x])
        return x

    def covariate_second_moment(self):
        """``E[X X^T]`` in closed form (inf entries when it does not exist)."""
        s = self.covariates.second_moment()
        if not self.intercept:
            return np.asarray(s, dtype=float)
        mu = self.covariates.mean()
        d = self.dim
        out = np.empty((d, d))
        out[0, 0] = 1.0
        out[0, 1:] = mu
        out[1:, 0] = mu
        out[1:, 1:] = s
        return out

    def continuous_mask(self):
        mask = list(self.covariates.continuous_mask())
        return [False] + mask if self.intercept else mask

    def to_dict(self):
        return {
            "covariates": self.covariates.to_dict(),
            "intercept": self.intercept,
            "target_weights": self.target_weights.tolist(),
            "noise": self.noise.to_dict(),
        }

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def gaussian_spec(d, weights=None, noise_scale=1.0, cov=None, intercept=False):
    """Convenience constructor: gaussian(cov or I) covariates with gaussian noise."""
    cov = np.eye(d) if cov is None else np.asarray(cov, dtype=float)
    dim = d + int(intercept)
    w = np.ones(dim) if weights is None else weights
    noise = NoNoise() if noise_scale == 0 else GaussianNoise(noise_scale)
    return DistributionSpec(GaussianCovariates(cov), w, noise, intercept)


# --------------------------------------------------------------------------
# spec <-> dict
# --------------------------------------------------------------------------


def _coord_from_dict(d):
    fam = d.get("family")
    if fam == "normal":
        return NormalCoord(float(d.get("scale", 1.0)))
    if fam == "student_t":
        return StudentTCoord(float(d["df"]), float(d.get("scale", 1.0)))
    if fam == "discrete":
        return DiscreteCoord(tuple(d["values"]), tuple(d["probs"]))
    raise ParseError(f"unknown coordinate family {fam!r}")


def covariates_from_dict(d):
    fam = d.get("family")
    if fam == "gaussian":
        cov = d.get("cov")
        if cov is None:
            cov = np.eye(int(d["dim"]))
        return GaussianCovariates(np.asarray(cov, dtype=float))
    if fam == "student_t":
        scale = d.get("scale")
        if scale is None:
            scale = np.eye(int(d["dim"]))
        return StudentTCovariates(float(d["df"]), np.asarray(scale, dtype=float))
    if fam == "discrete":
        return DiscreteCovariates(np.asarray(d["atoms"], dtype=float), np.asarray(d["probs"], dtype=float))
    if fam == "product":
        return ProductCovariates(tuple(_coord_from_dict(c) for c in d["coords"]))
    raise ParseError(f"unknown covariate family {fam!r}")


def noise_from_dict(d):
    fam = (d or {"family": "none"}).get("family")
    if fam == "none":
        return NoNoise()
    if fam == "gaussian":
        return GaussianNoise(float(d.get("scale", 1.0)))
    if fam == "student_t":
        return StudentTNoise(float(d["df"]), float(d.get("scale", 1.0)))
    if fam == "laplace":
        return LaplaceNoise(float(d.get("scale", 1.0)))
    if fam == "shifted_student_t":
        return ShiftedStudentTNoise(float(d.get("df", 3.0)), float(d.get("shift", 0.1)), float(d.get("scale", 1.0)))
    raise ParseError(f"unknown noise family {fam!r}")


def spec_from_dict(d):
    try:
        cov = covariates_from_dict(d["covariates"])
        intercept = bool(d.get("intercept", False))
        dim = cov.dim + int(intercept)
        w = d.get("target_weights")
        w = np.ones(dim) if w is None else np.asarray(w, dtype=float)
        return DistributionSpec(cov, w, noise_from_dict(d.get("noise")), intercept)
    except KeyError as exc:
        raise ParseError(f"spec is missing field {exc}") from None


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    design: np.ndarray
    response: np.ndarray
    seed: int = 0
    fingerprint: str = ""

    def __post_init__(self):
        x = np.array(self.design, dtype=float, ndmin=2)
        y = np.array(self.response, dtype=float).ravel()
        if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
            raise DomainError("design and response must have the same positive number of rows")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DomainError("dataset entries must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "design", x)
        object.__setattr__(self, "response", y)

    @property
    def n(self):
        return self.design.shape[0]

    @property
    def d(self):
        return self.design.shape[1]


def block_rng(seed, block, stream=0):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(block), int(stream)])))


def draw_xy(spec: DistributionSpec, n: int, seed: int):
    """Raw ``(X, Y)`` arrays; ``Y`` is built as ``X @ w* + noise``."""
    if n < 1:
        raise DomainError("n must be >= 1")
    xs, ys = [], []
    nblocks = -(-n // BLOCK)
    for b in range(nblocks):
        rng_x = block_rng(seed, b, 0)
        rng_e = block_rng(seed, b, 1)
        x = spec.draw_covariates(rng_x, BLOCK)
        e = spec.noise.draw(rng_e, BLOCK)
        xs.append(x)
        ys.append(x @ spec.target_weights + e)
    x = np.concatenate(xs)[:n]
    y = np.concatenate(ys)[:n]
    return x, y


def sample(spec: DistributionSpec, n: int, seed: int) -> Dataset:
    x, y = draw_xy(spec, n, seed)
    return Dataset(x, y, int(seed), spec.fingerprint())


def moment_exists(spec: DistributionSpec, order: float) -> dict:
    """Whether ``E|X^j|^order`` and ``E|Y|^order`` are finite, keyed ``x1..xd, y``."""
    cov_ok = list(spec.covariates.moments(order))
    if spec.intercept:
        cov_ok = [True] + cov_ok
    out = {f"x{j + 1}": ok for j, ok in enumerate(cov_ok)}
    used = [ok for ok, wj in zip(cov_ok, spec.target_weights) if wj != 0]
    noise_ok = spec.noise.moment(order) or isinstance(spec.noise, NoNoise)
    out["y"] = all(used) and noise_ok
    return out


def residual_moment_exists(spec: DistributionSpec, order: float) -> bool:
    """Whether ``E|<w*, X> - Y|^order`` is finite; negative orders allowed."""
    if order == 0:
        return True
    return spec.noise.moment(order)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def atomic_write_text(path, text):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j + 1}" for j in range(ds.d)] + ["y"])
    for row, y in zip(ds.design, ds.response):
        w.writerow([repr(float(v)) for v in row] + [repr(float(y))])
    return buf.getvalue()


def save_csv(ds: Dataset, path) -> None:
    atomic_write_text(path, dataset_to_csv(ds))


def load_csv(path) -> Dataset:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header != [f"x{j + 1}" for j in range(d)] + ["y"]:
        raise ParseError(f"{path}: line 1: malformed header {','.join(header)!r}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 1:
            raise ParseError(f"{path}: line {lineno}: expected {d + 1} fields, got {len(row)}")
        try:
            data.append([float(v) for v in row])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric cell") from None
    if not data:
        raise ParseError(f"{path}: no data rows")
    arr = np.asarray(data)
    return Dataset(arr[:, :d], arr[:, d])


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    return np.array_equal(a.design, b.design) and np.array_equal(a.response, b.response)


def stack_rows(rows: Sequence[Sequence[float]], y: Sequence[float]) -> Dataset:
    return Dataset(np.asarray(rows, dtype=float), np.asarray(y, dtype=float))
