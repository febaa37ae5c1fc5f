"""Command-line interface: ``icmix fit``, ``icmix simulate`` and ``icmix study``.

Exit codes: 0 success, 1 input error, 2 EM non-convergence (``fit``),
3 fewer than 95% of replicate fits succeeded (``study``).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import math
import sys
from pathlib import Path

import numpy as np

from icmix import io
from icmix.em import FitConfig, UnsupportedBasisError, fit
from icmix.model import DataError, baseline_survival
from icmix.simulation import (
    MODELS,
    GenConfig,
    config_dict,
    generate_dataset,
    run_study,
    scenario_grid,
)
from icmix.splines import BasisKind, BasisSpec, KnotError, build_basis, default_knots
from icmix.variance import normal_quantile

EXIT_OK, EXIT_INPUT, EXIT_NOCONV, EXIT_STUDY = 0, 1, 2, 3

log = logging.getLogger("icmix")


def _basis_for(args, data):
    kind = BasisKind(args.baseline)
    if kind is BasisKind.ISPLINE:
        spec = default_knots(
            data,
            n_interior=args.interior_knots,
            degree=args.degree,
            anchor_origin=args.knot_lower == "origin",
        )
    else:
        spec = BasisSpec(kind)
    return build_basis(spec)


def cmd_fit(args) -> int:
    started = _dt.datetime.now(_dt.timezone.utc)
    try:
        data = io.read_dataset(args.data)
        basis = _basis_for(args, data)
        result = fit(data, basis, FitConfig(tol=args.tol, max_iter=args.max_iter))
    except (DataError, KnotError, UnsupportedBasisError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    theta = result.theta_hat
    names = list(data.covariate_names) + [f"gamma{l + 1}" for l in range(theta.k)] + ["alpha"]
    est = theta.as_array()
    cov = result.covariance
    z = normal_quantile(args.level)
    rows = []
    if cov is not None and not cov.singular:
        se = cov.standard_errors()
        for name, e, s in zip(names, est, se):
            rows.append([name, e, s, e - z * s, e + z * s])
        se_p = math.exp(-theta.alpha) * se[-1]
        rows.append(["p", theta.p, se_p, max(0.0, theta.p - z * se_p), min(1.0, theta.p + z * se_p)])
    else:
        rows = [[name, e, None, None, None] for name, e in zip(names, est)]
        rows.append(["p", theta.p, None, None, None])
    io.write_csv(out / "estimates.csv", ["parameter", "estimate", "SE", "CI_lo", "CI_hi"], rows)

    finite = np.concatenate([data.L, data.R[np.isfinite(data.R)]])
    grid = np.linspace(0.0, float(finite.max()), args.grid_points)
    io.write_csv(
        out / "baseline_survival.csv",
        ["t", "S0_hat"],
        zip(grid, baseline_survival(grid, theta, basis)),
    )
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    io.write_manifest(
        out,
        "fit",
        {
            "data": str(Path(args.data).resolve()),
            "basis": basis.spec.to_dict(),
            "knot_lower": args.knot_lower,
            "tol": args.tol,
            "max_iter": args.max_iter,
            "level": args.level,
            "grid_points": args.grid_points,
        },
        started=started,
        diagnostics={
            "iterations": result.n_iter,
            "converged": result.converged,
            "loglik": result.loglik,
            "ascent_violations": result.ascent_violations(),
            "opg_singular": None if cov is None else cov.singular,
            "opg_condition": None if cov is None else cov.condition,
            "warnings": result.warnings,
        },
    )
    return EXIT_OK if result.converged else EXIT_NOCONV


def cmd_simulate(args) -> int:
    started = _dt.datetime.now(_dt.timezone.utc)
    try:
        config = GenConfig(
            baseline=args.baseline,
            obs_process=args.obs_process,
            beta=(args.beta1, args.beta2),
            p=args.p,
            n=args.n,
            reps=1,
            seed=args.seed,
        )
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(config, args.rep)
    io.write_dataset(out / "data.csv", data)
    io.write_manifest(
        out,
        "simulate",
        {**config_dict(config), "rep": args.rep},
        seed=args.seed,
        started=started,
        diagnostics={"n": data.n, "instantaneous": int(np.sum(data.psi == 0))},
    )
    return EXIT_OK


def _split_list(value, cast=str):
    return tuple(cast(v.strip()) for v in str(value).split(",") if v.strip())


def study_settings(args) -> dict:
    cfg = io.read_config(args.config) if args.config else {}
    settings = {
        "baselines": _split_list(cfg.get("baselines", "log,linear")),
        "obs_processes": _split_list(cfg.get("obs_processes", "exp,unif")),
        "beta1": _split_list(cfg.get("beta1", "-0.5,0.5"), float),
        "beta2": _split_list(cfg.get("beta2", "-0.5,0.5"), float),
        "p": float(cfg.get("p", 0.3)),
        "n": int(cfg.get("n", 100)),
        "reps": int(cfg.get("reps", 500)),
        "seed": int(cfg.get("seed", 20240101)),
        "models": _split_list(cfg.get("models", ",".join(MODELS))),
        "tol": float(cfg.get("tol", 1e-5)),
        "max_iter": int(cfg.get("max_iter", 5000)),
    }
    if args.reps is not None:
        settings["reps"] = args.reps
    if args.models is not None:
        settings["models"] = _split_list(args.models)
    if args.seed is not None:
        settings["seed"] = args.seed
    unknown = set(cfg) - set(settings)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return settings


def cmd_study(args) -> int:
    started = _dt.datetime.now(_dt.timezone.utc)
    try:
        s = study_settings(args)
        scenarios = scenario_grid(
            s["baselines"], s["obs_processes"], s["beta1"], s["beta2"],
            p=s["p"], n=s["n"], reps=s["reps"], seed=s["seed"],
        )
        for m in s["models"]:
            if m not in MODELS:
                raise ValueError(f"unknown model {m!r}")
        fit_config = FitConfig(tol=s["tol"], max_iter=s["max_iter"])
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table, curves, failures = [], [], []
    n_fits = n_ok = violations = 0
    for config in scenarios:
        log.info("scenario %s", config.label)
        summary = run_study(config, s["models"], fit_config, jobs=args.jobs)
        table += summary.table
        curves += summary.curves
        for f in summary.fits:
            n_fits += 1
            n_ok += f.ok
            violations += f.ascent_violations
            if not f.ok:
                failures.append([config.label, f.model, str(f.rep), f.error])

    io.write_csv(
        out / "summary.csv",
        ["scenario", "model", "parameter", "Bias", "SD", "ESE", "CP95"],
        ([r["scenario"], r["model"], r["parameter"], r["Bias"], r["SD"], r["ESE"], r["CP95"]] for r in table),
    )
    io.write_csv(
        out / "curves.csv",
        ["scenario", "model", "t", "mean", "q025", "q975"],
        ([c["scenario"], c["model"], c["t"], c["mean"], c["q025"], c["q975"]] for c in curves),
    )
    io.write_csv(out / "failures.csv", ["scenario", "model", "rep", "error"], failures)
    fraction = n_ok / max(1, n_fits)
    io.write_manifest(
        out,
        "study",
        {**s, "jobs": args.jobs},
        seed=s["seed"],
        started=started,
        diagnostics={
            "fits": n_fits,
            "successful_fits": n_ok,
            "success_fraction": fraction,
            "ascent_violations": violations,
        },
    )
    if failures:
        print(f"{len(failures)} of {n_fits} fits failed; see failures.csv", file=sys.stderr)
    return EXIT_OK if fraction >= 0.95 else EXIT_STUDY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icmix",
        description="PH mixture model for interval-censored data with instantaneous failures",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the model to a CSV data file")
    p_fit.add_argument("data", help="CSV with columns id,L,R,x1..xr (R may be 'inf')")
    p_fit.add_argument("--baseline", choices=[k.value for k in BasisKind], default="ispline")
    p_fit.add_argument("--degree", type=int, default=2)
    p_fit.add_argument("--interior-knots", type=int, default=1)
    p_fit.add_argument(
        "--knot-lower",
        choices=["origin", "data"],
        default="origin",
        help="lower boundary knot at 0 (default) or at the smallest nonzero endpoint",
    )
    p_fit.add_argument("--tol", type=float, default=1e-5)
    p_fit.add_argument("--max-iter", type=int, default=5000)
    p_fit.add_argument("--level", type=float, default=0.95)
    p_fit.add_argument("--grid-points", type=int, default=101)
    p_fit.add_argument("--out", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="generate one simulated data set")
    p_sim.add_argument("--baseline", default="log", choices=["log", "linear"])
    p_sim.add_argument("--obs-process", default="exp", choices=["exp", "unif"])
    p_sim.add_argument("--beta1", type=float, default=-0.5)
    p_sim.add_argument("--beta2", type=float, default=-0.5)
    p_sim.add_argument("--p", type=float, default=0.3)
    p_sim.add_argument("--n", type=int, default=100)
    p_sim.add_argument("--rep", type=int, default=0, help="replicate index")
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_study = sub.add_parser("study", help="run the replication study")
    p_study.add_argument("--config", help="key = value study configuration file")
    p_study.add_argument("--reps", type=int)
    p_study.add_argument("--models", help="comma separated subset of M1,M2,M3,M4")
    p_study.add_argument("--seed", type=int)
    p_study.add_argument("--jobs", type=int, default=1)
    p_study.add_argument("--out", required=True)
    p_study.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
