"""Command-line interface.

Subcommands: ``simulate`` (synthetic dataset + ground-truth sidecar),
``fit`` (full two-stage pipeline on a long CSV), ``tune`` (fit with
penalties always tuned), ``predict`` (original-scale growth-curve table from
a saved fit), and ``eval`` (score a saved fit against a truth sidecar).

Exit status is 0 on success — including a fit that hit its iteration cap,
which is recorded as ``converged: false`` in params.json rather than treated
as a failure — 1 on a runtime error (bad data, degenerate problem, missing
file), and 2 on bad flags.  Worker count comes from ``--threads``, else the
``HDGCM_THREADS`` environment variable, else the available parallelism;
results are identical for every thread count.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import List, Optional, Tuple

import numpy as np

from .curves import build_curve_table
from .errors import ParseError
from .io import (
    load_fit,
    load_long_csv,
    load_truth,
    save_fit,
    save_truth,
    write_curves_csv,
    write_long_csv,
    write_metrics_csv,
)
from .pipeline import FitConfig, fit
from .simulate import SimConfig, evaluate, generate_dataset

__all__ = ["build_parser", "main"]


def _resolve_threads(value: Optional[int]) -> int:
    if value is not None:
        return value
    env = os.environ.get("HDGCM_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ParseError(f"HDGCM_THREADS={env!r} is not an integer") from None
    return os.cpu_count() or 1


def _parse_k_grid(text: str) -> Tuple[int, ...]:
    parts = text.split("..")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected a range like 1..5")
    try:
        lo, hi = int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError("expected a range like 1..5") from None
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError("range bounds must satisfy 1 <= A <= B")
    return tuple(range(lo, hi + 1))


def _parse_grid(text: str) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.split(",") if v.strip() != ""])
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None
    if values.size == 0 or np.any(values < 0):
        raise argparse.ArgumentTypeError("grids must be nonempty and nonnegative")
    return values


def _add_fit_flags(p: argparse.ArgumentParser, tuning_fixed: bool) -> None:
    p.add_argument("--data", required=True, help="long-format CSV")
    p.add_argument("--k", type=int, default=None, help="fix the factor rank")
    p.add_argument("--k-grid", type=_parse_k_grid, default=None, metavar="A..B",
                   help="rank grid for BIC selection, e.g. 1..5")
    if not tuning_fixed:
        p.add_argument("--lambda-d", type=float, default=None,
                       help="fixed random-slope penalty")
        p.add_argument("--lambda-b", type=float, default=None,
                       help="fixed fixed-slope penalty")
        p.add_argument("--tune", action="store_true",
                       help="tune both penalties per iteration by BIC")
    p.add_argument("--lambda-d-grid", type=_parse_grid, default=None,
                   metavar="X,Y,...", help="candidate grid for lambda_d")
    p.add_argument("--lambda-b-grid", type=_parse_grid, default=None,
                   metavar="X,Y,...", help="candidate grid for lambda_B")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="echoed into params.json")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--no-standardize", action="store_true",
                   help="fit on the raw covariate scales")


def build_parser() -> argparse.ArgumentParser:
    # allow_abbrev=False: --lambda-d must not silently match --lambda-d-grid
    parser = argparse.ArgumentParser(
        prog="hdgcm",
        description="growth-curve models for many longitudinal outcomes",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset",
                           allow_abbrev=False)
    p_sim.add_argument("--r", type=int, default=100, help="number of outcomes")
    p_sim.add_argument("--n", type=int, default=100, help="number of subjects")
    p_sim.add_argument("--noise", type=float, default=0.2,
                       help="noise level as a fraction of signal spread")
    p_sim.add_argument("--k-star", type=int, default=3, help="true factor rank")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True, help="output directory")

    p_fit = sub.add_parser("fit", help="fit the two-stage model",
                           allow_abbrev=False)
    _add_fit_flags(p_fit, tuning_fixed=False)

    p_tune = sub.add_parser("tune", help="fit with penalties always tuned",
                            allow_abbrev=False)
    _add_fit_flags(p_tune, tuning_fixed=True)

    p_pred = sub.add_parser("predict", help="emit growth-curve tables",
                            allow_abbrev=False)
    p_pred.add_argument("--fit", required=True, help="fit directory or params.json")
    p_pred.add_argument("--data", required=True, help="long-format CSV")
    p_pred.add_argument("--out", required=True, help="output directory")
    p_pred.add_argument("--threads", type=int, default=None)

    p_eval = sub.add_parser("eval", help="score a fit against a truth sidecar",
                            allow_abbrev=False)
    p_eval.add_argument("--fit", required=True, help="fit directory or params.json")
    p_eval.add_argument("--truth", required=True, help="truth.json path")
    p_eval.add_argument("--out", default=None,
                        help="output directory (default: the fit directory)")

    return parser


def _cmd_simulate(args) -> int:
    cfg = SimConfig(r=args.r, n=args.n, noise_pct=args.noise,
                    K_star=args.k_star, seed=args.seed)
    data, truth = generate_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    write_long_csv(os.path.join(args.out, "data.csv"), data)
    save_truth(os.path.join(args.out, "truth.json"), truth)
    n_obs = sum(s.n_visits for s in data.subjects)
    print(f"simulate: wrote {len(data.subjects)} subjects, {n_obs} rows, "
          f"r={args.r} -> {args.out}")
    return 0


def _fit_config_from_args(args, parser, force_tune: bool) -> FitConfig:
    if (args.k is None) == (args.k_grid is None):
        parser.error("give exactly one of --k or --k-grid")
    tune = force_tune or getattr(args, "tune", False)
    lam_d = getattr(args, "lambda_d", None)
    lam_b = getattr(args, "lambda_b", None)
    if tune and (lam_d is not None or lam_b is not None):
        parser.error("--tune conflicts with --lambda-d/--lambda-b")
    if not tune and (lam_d is None or lam_b is None):
        parser.error("give --tune, or both --lambda-d and --lambda-b")
    return FitConfig(
        K=args.k,
        K_grid=args.k_grid,
        lambda_d=lam_d,
        lambda_B=lam_b,
        tune=tune,
        lambda_d_grid=args.lambda_d_grid,
        lambda_B_grid=args.lambda_b_grid,
        tol=args.tol,
        max_iter=args.max_iter,
        standardize=not args.no_standardize,
        n_threads=_resolve_threads(args.threads),
    )


def _cmd_fit(args, parser, force_tune: bool) -> int:
    config = _fit_config_from_args(args, parser, force_tune)
    data = load_long_csv(args.data)
    result = fit(data, config)
    save_fit(args.out, result, extra_config={"seed": args.seed, "data": args.data})
    status = "converged" if result.converged else "hit the iteration cap"
    print(f"fit: K_hat={result.K_hat} lambda_d={result.lambda_d:.6g} "
          f"lambda_B={result.lambda_B:.6g} loglik={result.loglik:.6g} "
          f"({status} after {result.n_iter} iterations) -> {args.out}")
    return 0


def _cmd_predict(args) -> int:
    loaded = load_fit(args.fit)
    data = load_long_csv(args.data)
    table = build_curve_table(
        loaded.params,
        standardization=loaded.standardization,
        data=data,
        n_threads=_resolve_threads(args.threads),
    )
    os.makedirs(args.out, exist_ok=True)
    write_curves_csv(os.path.join(args.out, "curves.csv"), table)
    print(f"predict: wrote curves for {table.r} outcomes, "
          f"{table.n_subjects} subjects -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    loaded = load_fit(args.fit)
    truth = load_truth(args.truth)
    metrics = evaluate(
        loaded.params,
        loaded.mask_fixed,
        loaded.mask_random,
        truth,
        loaded.K_hat,
        standardization=loaded.standardization,
    )
    out_dir = args.out
    if out_dir is None:
        out_dir = args.fit if os.path.isdir(args.fit) else os.path.dirname(args.fit)
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics)
    print(f"eval: err_B={metrics.err_B:.6g} err_G={metrics.err_G:.6g} "
          f"TPR_f={metrics.tpr_fixed:.4f} FPR_f={metrics.fpr_fixed:.4f} "
          f"TPR_r={metrics.tpr_random:.4f} FPR_r={metrics.fpr_random:.4f} "
          f"K_hat={metrics.K_hat} -> {out_dir}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "fit":
            return _cmd_fit(args, parser, force_tune=False)
        if args.command == "tune":
            return _cmd_fit(args, parser, force_tune=True)
        if args.command == "predict":
            return _cmd_predict(args)
        if args.command == "eval":
            return _cmd_eval(args)
        parser.error(f"unknown command {args.command!r}")
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"hdgcm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
