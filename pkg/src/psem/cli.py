"""Command-line entry point: ``psem <command> [options]``.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys

import numpy as np

from . import backtest
from .config import REFERENCE_GRID, ExperimentConfig
from .errors import InvalidParameter, OutOfRange, ParseError, PsemError
from .market_data import (
    compute_returns,
    load_prices,
    read_returns_csv,
    synth_universe,
    write_returns_csv,
)
from .metrics import bvd_decomposition

log = logging.getLogger("psem")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg.validate(allow_extended=args.allow_extended)


def _load_data(args):
    if getattr(args, "prices", None):
        return compute_returns(load_prices(args.prices))
    if not args.data:
        raise UsageError("one of --data or --prices is required")
    return read_returns_csv(args.data)


def cmd_ingest(args) -> int:
    prices = load_prices(args.prices)
    returns = compute_returns(prices)
    print(f"rows={returns.n_rows} assets={returns.n_assets} dropped_rows={prices.dropped_rows}")
    if args.dry_run:
        return EXIT_OK
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "returns.csv")
    write_returns_csv(returns, path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    r = synth_universe(args.assets, args.days, tuple(args.vol), args.corr, tuple(args.drift), seed)
    print(f"rows={r.n_rows} assets={r.n_assets} seed={seed}")
    if args.dry_run:
        return EXIT_OK
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "returns.csv")
    write_returns_csv(r, path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_backtest(args) -> int:
    cfg = _load_config(args)
    data = _load_data(args)
    kind = "one-step" if cfg.horizon_months == 1 else f"{cfg.horizon_months}-month multi-step"
    if args.dry_run:
        need = backtest.required_rows(cfg)
        print(f"{kind} run, {cfg.n_simulations if cfg.horizon_months == 1 else 1} simulation(s), "
              f"needs {need} rows, data has {data.n_rows}")
        return EXIT_OK
    if cfg.horizon_months == 1:
        res = backtest.one_step_experiment(data, cfg, parallel=args.parallel)
    else:
        res = backtest.multi_step_experiment(data, cfg)
    backtest.write_results([res], args.out)
    agg = res.aggregate["modified_sharpe"]
    print(f"{kind}: {len(res.sims) - res.n_failed}/{len(res.sims)} ok, "
          f"mean modified Sharpe {agg['mean']:.4f} (std {agg['std']:.4f})")
    if all(not s.ok for s in res.sims):
        print("all simulations failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _read_grid(path) -> dict:
    try:
        with open(path) as fh:
            grid = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read grid file {path}: {exc}") from exc
    if not isinstance(grid, dict) or not grid:
        raise UsageError("grid file must be a non-empty JSON object of lists")
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise UsageError(f"grid entry {k!r} must be a non-empty list")
    return grid


def cmd_grid(args) -> int:
    if args.print_default:
        print(json.dumps(REFERENCE_GRID, indent=2))
        return EXIT_OK
    if not args.grid:
        raise UsageError("--grid is required (or --print-default)")
    grid = _read_grid(args.grid)
    base = _load_config(args)
    cfgs = backtest.expand_grid(grid, base)
    for c in cfgs:
        c.validate(allow_extended=args.allow_extended)
    data = _load_data(args)
    print(f"{len(cfgs)} grid cell(s)")
    if args.dry_run:
        return EXIT_OK
    results = backtest.grid_search(data, grid, base, parallel=args.parallel)
    paths = backtest.write_results(results, args.out)
    table = backtest.sharpe_table(results)
    table.to_csv(os.path.join(args.out, "sharpe_table.csv"))
    best = results[0]
    print(f"best config_id={best.config_id} mean modified Sharpe {best.mean():.4f}; wrote {paths['summary.json']}")
    if all(not s.ok for r in results for s in r.sims):
        print("all simulations failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_compare(args) -> int:
    base = _load_config(args).with_(horizon_months=args.horizon)
    for g, t, e, m in itertools.product(args.gammas, args.thresholds, args.epsilons, args.Ms):
        base.with_(gamma=g, threshold_T=t, epsilon=e, M=m).validate(allow_extended=args.allow_extended)
    data = _load_data(args)
    if args.dry_run:
        print(f"compare over gamma={args.gammas} T={args.thresholds} eps={args.epsilons} M={args.Ms}")
        return EXIT_OK
    table, results = backtest.compare_methods(data, base, args.gammas, args.thresholds, args.epsilons,
                                              args.Ms, parallel=args.parallel)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "compare.csv")
    table.to_csv(path)
    print(table.to_string(float_format=lambda v: f"{v:.3f}"))
    print(f"wrote {path}")
    if all(not s.ok for r in results for s in r.sims):
        print("all simulations failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def bvd_identity_suite(trials: int = 1000, seed: int = 0, rtol: float = 1e-9):
    """Random ensembles checking bias + variance - diversity == expected loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = 0
    for i in range(trials):
        m = int(rng.choice([1, 2, 5, 10]))
        n = int(rng.choice([5, 50]))
        k = int(rng.choice([1, 20]))
        preds = rng.normal(0.0, 1.0, (k, m, n)) + rng.normal(0.0, 1.0, (1, m, n))
        rep = bvd_decomposition(preds, rng.normal(0.0, 1.0, n))
        worst = max(worst, rep.identity_gap)
        failures += rep.identity_gap > rtol
    return failures, worst


def cmd_bvd_check(args) -> int:
    seed = 0 if args.seed is None else args.seed
    failures, worst = bvd_identity_suite(args.trials, seed)
    status = "PASS" if failures == 0 else "FAIL"
    print(f"{status} bias-variance-diversity identity: {args.trials - failures}/{args.trials} "
          f"within 1e-9 (worst relative gap {worst:.3e})")
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


def _common(p: argparse.ArgumentParser, data=True):
    p.add_argument("--config", metavar="PATH", help="JSON experiment config (flat key/values)")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="base seed, overrides the config")
    p.add_argument("--parallel", type=int, default=1, metavar="N", help="worker processes")
    p.add_argument("--allow-extended", action="store_true",
                   help="permit hyperparameters outside the reference grid")
    p.add_argument("--dry-run", action="store_true", help="validate and report without running/writing")
    if data:
        p.add_argument("--data", metavar="PATH", help="returns CSV (date column + one column per asset)")
        p.add_argument("--prices", metavar="PATH", help="prices CSV, converted to returns on load")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="prices CSV -> returns CSV")
    p.add_argument("prices", help="prices CSV")
    _common(p, data=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a synthetic one-factor returns CSV")
    _common(p, data=False)
    p.add_argument("--assets", type=int, default=20)
    p.add_argument("--days", type=int, default=2000)
    p.add_argument("--corr", type=float, default=0.3)
    p.add_argument("--vol", type=float, nargs=2, default=[0.01, 0.02], metavar=("LO", "HI"))
    p.add_argument("--drift", type=float, nargs=2, default=[0.0, 0.0005], metavar=("LO", "HI"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("backtest", help="one-step or multi-step experiment from a config")
    _common(p)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    _common(p)
    p.add_argument("--grid", metavar="PATH", help="JSON object mapping config keys to value lists")
    p.add_argument("--print-default", action="store_true", help="print the reference grid and exit")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("compare", help="s-RBFN against the baseline allocators")
    _common(p)
    p.add_argument("--gammas", type=float, nargs="+", default=[1, 2, 3])
    p.add_argument("--thresholds", type=float, nargs="+", default=[-0.005, 0.0, 0.003])
    p.add_argument("--epsilons", type=float, nargs="+", default=[0.0, 0.1, 0.35])
    p.add_argument("--Ms", type=int, nargs="+", default=[5, 10, 20, 35])
    p.add_argument("--horizon", type=int, default=24, help="months of monthly reallocation")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bvd-check", help="verify the bias-variance-diversity identity")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bvd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidParameter, ParseError, OutOfRange, FileNotFoundError,
            json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PsemError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
