"""Command line front end.

Exit codes: 0 success, 1 a checked bound was violated beyond its slack,
2 configuration or input error, 3 numerical failure.  Machine-readable
results go to standard output, progress to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import jsonschema
import numpy as np

from pnorm_erm import bound_calculator as bc
from pnorm_erm import experiment_harness as eh
from pnorm_erm.constants_lab import ConstantEstimates, estimate_constants
from pnorm_erm.distributions import (
    atomic_write_text,
    dataset_to_csv,
    gaussian_spec,
    load_csv,
    sample,
    spec_from_dict,
)
from pnorm_erm.erm_solver import SolverOptions, fit
from pnorm_erm.errors import (
    DomainError,
    EstimatorInconsistency,
    MaxIterations,
    MomentViolation,
    NonPositiveDefinite,
    NumericalBreakdown,
    ParseError,
)
from pnorm_erm.selftest import run_scalar_suites

log = logging.getLogger("pnorm_erm")

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

KINDS = ("excess_risk", "realizable", "lower_tail", "curvature", "gamma_lower", "markov_grad", "derivative_check")

_NUM = {"type": "number"}
_INT = {"type": "integer"}
CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "command": {"enum": ["gen-data", "fit", "constants", "bounds", "experiment", "selftest"]},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "spec": {
            "type": "object",
            "additionalProperties": False,
            "required": ["covariates"],
            "properties": {
                "covariates": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["family"],
                    "properties": {k: {} for k in ("family", "dim", "cov", "df", "scale", "atoms", "probs", "coords")},
                },
                "noise": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["family"],
                    "properties": {k: {} for k in ("family", "df", "scale", "shift")},
                },
                "intercept": {"type": "boolean"},
                "target_weights": {"type": ["array", "null"], "items": _NUM},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": ["number", "null"]},
                "max_iter": _INT,
                "mu0": {"type": ["number", "null"]},
                "homotopy_factor": _NUM,
                "armijo": _NUM,
                "max_halvings": _INT,
            },
        },
        "experiment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(KINDS)},
                "p": _NUM,
                "n_grid": {"type": "array", "items": _INT, "minItems": 1},
                "n": _INT,
                "trials": _INT,
                "delta": _NUM,
                "mc_samples": _INT,
                "constants_mc": _INT,
                "constants": {"type": ["object", "string", "null"]},
                "probes": _INT,
                "sigma": _NUM,
                "rho": _NUM,
            },
        },
    },
}


class UsageError(Exception):
    """Bad command line or config; maps to exit code 2."""


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(k) for k in exc.absolute_path) or "<root>"
        raise UsageError(f"{path}: {where}: {exc.message}") from None
    return cfg


def _spec(cfg):
    return spec_from_dict(cfg["spec"]) if "spec" in cfg else gaussian_spec(5)


def _solver(cfg, args):
    opts = dict(cfg.get("solver", {}))
    for key in ("tol", "max_iter", "mu0", "homotopy_factor"):
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    return SolverOptions(**opts)


def _pick(args, cfg, key, default=None, block=None):
    val = getattr(args, key, None)
    if val is not None:
        return val
    src = cfg.get(block, {}) if block else cfg
    return src.get(key, default)


def _load_constants(ref):
    if ref is None or isinstance(ref, ConstantEstimates):
        return ref
    if isinstance(ref, dict):
        return ConstantEstimates.from_dict(ref)
    try:
        with open(ref, encoding="utf-8") as fh:
            return ConstantEstimates.from_json(fh.read())
    except FileNotFoundError:
        raise UsageError(f"constants file not found: {ref}") from None
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise UsageError(f"{ref}: not a constants file ({exc})") from None


def _emit(text, out_dir=None, name=None):
    if out_dir and name:
        atomic_write_text(os.path.join(out_dir, name), text)
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args, cfg):
    spec = _spec(cfg)
    n = _pick(args, cfg, "n", 100, "experiment")
    seed = _pick(args, cfg, "seed", 0)
    text = dataset_to_csv(sample(spec, int(n), int(seed)))
    out = _pick(args, cfg, "out")
    if out:
        path = out if out.endswith(".csv") else os.path.join(out, "data.csv")
        atomic_write_text(path, text)
        log.info("wrote %s", path)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_fit(args, cfg):
    p = _pick(args, cfg, "p", 2.0, "experiment")
    if args.data:
        try:
            ds = load_csv(args.data)
        except FileNotFoundError:
            raise UsageError(f"data file not found: {args.data}") from None
    else:
        ds = sample(_spec(cfg), int(_pick(args, cfg, "n", 100, "experiment")), int(_pick(args, cfg, "seed", 0)))
    sol = fit(ds, float(p), _solver(cfg, args))
    body = {"p": p, "weights": sol.weights.tolist(), "grad_norm": sol.grad_norm, "iterations": sol.iterations,
            "converged": sol.converged, "risk": sol.risk, "tol": sol.tol}
    _emit(json.dumps(body, indent=2), _pick(args, cfg, "out"), "fit.json")
    return EXIT_OK


def cmd_constants(args, cfg):
    spec = _spec(cfg)
    p = float(_pick(args, cfg, "p", 2.0, "experiment"))
    mc = int(args.mc or cfg.get("experiment", {}).get("constants_mc", 200_000))
    const = estimate_constants(spec, p, mc, int(_pick(args, cfg, "seed", 0)), args.restarts)
    _emit(const.to_json(), _pick(args, cfg, "out"), "constants.json")
    return EXIT_OK


def cmd_bounds(args, cfg):
    th = args.theorem
    delta = _pick(args, cfg, "delta", 0.1, "experiment")
    n = _pick(args, cfg, "n", None, "experiment")
    if th == "3":
        if args.d is None or args.rho is None:
            raise UsageError("theorem 3 needs --d and --rho")
        if n is not None:
            print(repr(bc.realizable_tail(int(n), args.d, args.rho)))
        else:
            size, regime = bc.realizable_sample_size(args.d, delta, args.rho)
            print(json.dumps({"n": size, "regime": regime,
                              "theorem2_comparison": bc.theorem2_threshold(args.d, delta, args.rho)}))
        return EXIT_OK
    if n is None:
        raise UsageError(f"theorem {th} needs --n")
    if th == "prop1":
        if args.sigma_sq is None or args.d is None:
            raise UsageError("prop1 needs --sigma-sq and --d")
        print(repr(bc.lower_tail_factor(math.sqrt(args.sigma_sq), args.d, delta, n)))
        return EXIT_OK
    if th == "lemma2":
        if args.V is None:
            raise UsageError("lemma2 needs --V")
        print(repr(bc.markov_grad_bound(args.V, n, delta)))
        return EXIT_OK
    const = _load_constants(args.constants)
    if const is None:
        need = {"1": ("V", "sigma_sq", "d"), "4": ("V", "sigma_sq", "d", "p", "c_lp"),
                "5": ("V", "sigma_sq", "d", "p", "c_l2", "c_star")}[th]
        missing = [k for k in need if getattr(args, k, None) is None]
        if missing:
            raise UsageError(f"theorem {th} needs --constants or " + ", ".join("--" + k.replace("_", "-") for k in missing))
        const = ConstantEstimates(p=float(args.p or 2.0), d=args.d, H_p=np.eye(args.d), V_p=args.V,
                                  sigma_p_sq=args.sigma_sq, c_p_lp=args.c_lp, c_p_l2=args.c_l2,
                                  c_star_p=args.c_star, epsilon=None, t_star=None, mc_samples=0, seed=0)
    report = bc.bound_report(th, int(n), delta, const)
    if args.csv:
        _emit(report.to_csv(), _pick(args, cfg, "out"), "bound.csv")
    elif args.json:
        _emit(report.to_json(), _pick(args, cfg, "out"), "bound.json")
    else:
        print(repr(report.bound_value))
    return EXIT_OK


def _experiment_config(args, cfg):
    exp = cfg.get("experiment", {})
    n_grid = [args.n] if args.n is not None else exp.get("n_grid") or ([exp["n"]] if "n" in exp else None)
    if not n_grid:
        raise UsageError("experiment needs n_grid (or n) in the config, or --n")
    return eh.ExperimentConfig(
        spec=_spec(cfg),
        p=float(_pick(args, cfg, "p", 2.0, "experiment")),
        n_grid=n_grid,
        trials=int(_pick(args, cfg, "trials", 100, "experiment")),
        delta=float(_pick(args, cfg, "delta", 0.1, "experiment")),
        seed=int(_pick(args, cfg, "seed", 0)),
        constants=_load_constants(exp.get("constants")),
        mc_samples=int(exp.get("mc_samples", 100_000)),
        constants_mc=int(exp.get("constants_mc", 200_000)),
        solver=_solver(cfg, args),
    )


def cmd_experiment(args, cfg):
    if not args.config:
        raise UsageError("experiment requires --config")
    exp = cfg.get("experiment", {})
    kind = exp.get("kind", "excess_risk")
    ec = _experiment_config(args, cfg)
    out = _pick(args, cfg, "out")
    n = ec.n_grid[-1]
    if kind == "excess_risk":
        res = eh.excess_risk_campaign(ec, workers=args.workers)
        passed = True  # coverage is reported, not asserted
    elif kind == "realizable":
        res = eh.realizable_campaign(ec, workers=args.workers, rho=exp.get("rho"))
        passed = res.summary["all_ok"]
    elif kind == "derivative_check":
        checks = eh.derivative_check_campaign(ec.spec, ec.p, exp.get("probes", 10), ec.mc_samples, ec.seed)
        body = [c.__dict__ for c in checks]
        passed = all(c.grad_rel_err <= 1e-3 and c.hess_rel_err <= 1e-3 for c in checks)
        _emit(json.dumps({"kind": kind, "checks": body, "ok": passed}, indent=2), out, "summary.json")
        return EXIT_OK if passed else EXIT_ASSERT
    else:
        rep = _coverage(kind, ec, exp, n)
        _emit(json.dumps(rep.to_dict(), indent=2, sort_keys=True), out, "summary.json")
        return EXIT_OK if rep.ok else EXIT_ASSERT
    if out:
        res.write(out)
        log.info("wrote %s", out)
    sys.stdout.write(res.to_json() + "\n")
    return EXIT_OK if passed else EXIT_ASSERT


def _coverage(kind, ec, exp, n):
    spec, p = ec.spec, ec.p
    if kind == "lower_tail":
        if p != 2:
            const = ec.resolved_constants()
            sigma = exp.get("sigma", math.sqrt(const.sigma_p_sq))
            return eh.lower_tail_campaign(spec, n, ec.delta, ec.trials, sigma, ec.seed, p, const.H_p)
        sigma = exp.get("sigma") or math.sqrt(ec.resolved_constants().sigma_p_sq)
        return eh.lower_tail_campaign(spec, n, ec.delta, ec.trials, sigma, ec.seed)
    const = ec.resolved_constants()
    if kind == "curvature":
        return eh.curvature_campaign(spec, p, n, ec.delta, ec.trials, const.H_p, ec.seed)
    if kind == "gamma_lower":
        return eh.gamma_lower_campaign(spec, p, n, ec.delta, ec.trials, exp.get("probes", 8), const, ec.seed)
    return eh.markov_grad_campaign(spec, p, n, ec.delta, ec.trials, const, ec.seed)


def cmd_selftest(args, cfg):
    seed = int(_pick(args, cfg, "seed", 0))
    ok = True
    for r in run_scalar_suites(100_000, seed):
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.violations} violations in {r.draws} draws")
        ok &= r.ok
    if not args.quick:
        rng = np.random.default_rng(seed)
        worst = 0.0
        for k in range(50):
            d = int(rng.integers(1, 11))
            n = int(rng.integers(d + 1, 501))
            ds = sample(gaussian_spec(d), n, seed + k)
            ref = np.linalg.solve(ds.design.T @ ds.design, ds.design.T @ ds.response)
            worst = max(worst, float(np.linalg.norm(fit(ds, 2.0).weights - ref)))
        good = worst <= 1e-8
        print(f"{'PASS' if good else 'FAIL'} p=2 normal equations: max l2 error {worst:.3e}")
        ok &= good
        worst = 0.0
        for _ in range(1000):
            d = int(rng.integers(2, 21))
            pts = rng.standard_normal((int(rng.integers(1, d)), d))
            v = eh.orthogonal_complement(pts)
            worst = max(worst, float(np.max(np.abs(pts @ v)) / (np.linalg.norm(v) * np.abs(pts).max())))
        good = worst <= 1e-10
        print(f"{'PASS' if good else 'FAIL'} orthogonal complement: max scaled dot {worst:.3e}")
        ok &= good
    return EXIT_OK if ok else EXIT_ASSERT


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration (path); flags override its values")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed (non-negative integer)")
    common.add_argument("--out", metavar="DIR", help="output directory (files are written atomically)")
    common.add_argument("--workers", type=int, metavar="N", help="worker processes (count, default: available CPUs)")
    common.add_argument("--p", type=float, metavar="FLOAT", help="loss exponent p > 1 (dimensionless)")
    common.add_argument("--n", type=int, metavar="INT", help="sample size (rows)")
    common.add_argument("--delta", type=float, metavar="FLOAT", help="confidence level delta in (0, 1] (probability)")
    common.add_argument("--trials", type=int, metavar="INT", help="Monte Carlo trials per sample size (count)")
    common.add_argument("-v", "--verbose", action="store_true", help="progress messages on standard error")

    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--tol", type=float, metavar="FLOAT", help="gradient norm tolerance (risk units per weight unit)")
    solver.add_argument("--max-iter", type=int, metavar="INT", help="Newton iteration cap (count)")
    solver.add_argument("--mu0", type=float, metavar="FLOAT", help="initial smoothing radius for p < 2 (residual units)")
    solver.add_argument("--homotopy-factor", type=float, metavar="FLOAT",
                        help="divisor applied to the smoothing radius per iteration (dimensionless, > 1)")

    ap = argparse.ArgumentParser(prog="pnorm-erm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="sample a dataset as CSV")
    g.set_defaults(func=cmd_gen_data)

    f = sub.add_parser("fit", parents=[common, solver], help="minimize the empirical p-loss risk")
    f.add_argument("--data", metavar="PATH", help="CSV with header x1..xd,y (default: sample from the spec)")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("constants", parents=[common], help="estimate H_p, V_p, sigma_p^2, c_p, c*_p")
    c.add_argument("--mc", type=int, metavar="INT", help="Monte Carlo sample size (rows, default 200000)")
    c.add_argument("--restarts", type=int, default=32, metavar="INT", help="sphere search restarts (count)")
    c.set_defaults(func=cmd_constants)

    b = sub.add_parser("bounds", parents=[common], help="evaluate a closed-form bound")
    b.add_argument("--theorem", required=True, choices=["1", "3", "4", "5", "prop1", "lemma2"],
                   help="1: p = 2, 3: realizable tail, 4: p > 2, 5: p in (1, 2), prop1: lower-tail factor, "
                        "lemma2: gradient bound")
    b.add_argument("--d", type=int, metavar="INT", help="dimension (count)")
    b.add_argument("--rho", type=float, metavar="FLOAT", help="small-ball supremum in [0, 1) (probability)")
    b.add_argument("--constants", metavar="PATH", help="constants JSON written by the constants command")
    b.add_argument("--V", type=float, metavar="FLOAT", help="asymptotic functional V_p (risk units)")
    b.add_argument("--sigma-sq", type=float, metavar="FLOAT", help="sigma_p^2 (dimensionless, >= 1)")
    b.add_argument("--c-lp", type=float, metavar="FLOAT", help="L^p to H_p equivalence constant (dimensionless)")
    b.add_argument("--c-l2", type=float, metavar="FLOAT", help="L^2 to H_p equivalence constant (dimensionless)")
    b.add_argument("--c-star", type=float, metavar="FLOAT", help="E|r*|^(2(p-2)) (residual units^(2(p-2)))")
    b.add_argument("--json", action="store_true", help="print the full report as JSON")
    b.add_argument("--csv", action="store_true", help="print the report as a one-row CSV")
    b.set_defaults(func=cmd_bounds)

    e = sub.add_parser("experiment", parents=[common, solver], help="run a seeded campaign from a config")
    e.set_defaults(func=cmd_experiment)

    s = sub.add_parser("selftest", parents=[common], help="randomized inequality suites")
    s.add_argument("--quick", action="store_true", help="scalar suites only (1e5 draws each)")
    s.set_defaults(func=cmd_selftest)
    return ap


def run(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, ParseError, DomainError, MomentViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalBreakdown, MaxIterations, NonPositiveDefinite, EstimatorInconsistency) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
