"""One-step, multi-step and grid experiments.

A decision at row ``start`` uses the ``train_len`` rows before it: every
asset gets its own freshly initialised predictor whose 1-month recurrent
forecast ranks the universe, M constituents are selected, the allocator
fits weights on the training window and the weights are held for the next
month. One-step runs repeat a single decision over ``n_simulations`` seeds
(seed + k); multi-step runs roll ``horizon_months`` decisions forward one
month at a time (month h uses seed + h).
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import baselines
from .config import ExperimentConfig
from .ensemble import equal_weight_target, fit_ensemble, form_structured_dataset
from .errors import OutOfRange, PsemError
from .market_data import ReturnsMatrix
from .metrics import MetricReport, metric_report
from .predictor import train_independent
from .selection import SelectionConfig, rank_assets, select_assets

log = logging.getLogger(__name__)

METRICS = ("modified_sharpe", "annualized_sharpe", "sortino", "omega", "max_drawdown")


@dataclass
class StepRecord:
    step: int
    start: int
    selected: list[str]
    weights: list[float]
    daily: np.ndarray


@dataclass
class SimRecord:
    sim: int
    seed: int
    status: str = "ok"
    report: MetricReport | None = None
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class RunResult:
    config: ExperimentConfig
    kind: str
    sims: list[SimRecord]
    wall_clock: float = 0.0
    config_id: int = 0

    @property
    def partial(self) -> bool:
        return any(not s.ok for s in self.sims)

    @property
    def n_failed(self) -> int:
        return sum(not s.ok for s in self.sims)

    def metric_values(self, name: str) -> np.ndarray:
        return np.array([getattr(s.report, name) for s in self.sims if s.report is not None], dtype=float)

    @property
    def aggregate(self) -> dict:
        out = {}
        for name in METRICS:
            v = self.metric_values(name)
            v = v[np.isfinite(v)]
            out[name] = {
                "mean": float(v.mean()) if v.size else math.nan,
                "std": float(v.std()) if v.size else math.nan,
                "n": int(v.size),
            }
        return out

    def mean(self, name: str = "modified_sharpe") -> float:
        return self.aggregate[name]["mean"]


def required_rows(cfg: ExperimentConfig, months: int | None = None) -> int:
    months = cfg.horizon_months if months is None else months
    return cfg.offset + cfg.train_len + months * cfg.days_per_month


def allocate(name: str, train: ReturnsMatrix, cfg: ExperimentConfig, seed: int, prequential_mse=None):
    """Weights for the selected constituents from their training window."""
    if name == "s-rbfn":
        ds, _ = form_structured_dataset(train, cfg.predictor_config(seed), cfg.epsilon)
        fit = fit_ensemble(ds, equal_weight_target(ds.targets), cfg.lambda_s, cfg.basis_kind)
        return fit.portfolio_weights
    if name == "equal":
        return baselines.allocate_equal(train.n_assets).weights
    if name == "mse_weighted":
        return baselines.allocate_mse_weighted(prequential_mse).weights
    return baselines.ALLOCATORS[name](train).weights


def run_decision(data: ReturnsMatrix, start: int, cfg: ExperimentConfig, seed: int,
                 step: int = 0, allocators=None) -> dict[str, StepRecord]:
    """Rank, select, allocate at row ``start`` and hold for one month.

    ``allocators`` lists allocator names sharing the same ranking and
    selection (defaults to the configured one).
    """
    month = cfg.days_per_month
    if start - cfg.train_len < 0 or start + month > data.n_rows:
        raise OutOfRange(f"decision at row {start} needs rows {start - cfg.train_len}..{start + month - 1}")
    train = data.rows(start - cfg.train_len, start)
    test = data.rows(start, start + month)
    pcfg = cfg.predictor_config(seed)

    stack, preq, targets = train_independent(train.values, pcfg, role=0)
    history = train.values[-cfg.lag_window:].T
    forecasts = stack.recurrent_forecast(history, month)
    ranking = rank_assets(dict(zip(train.asset_ids, forecasts)), index=start)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        chosen = select_assets(ranking, SelectionConfig(cfg.M, cfg.threshold_T, cfg.gamma, seed))

    pos = [train.asset_ids.index(a) for a in chosen]
    mse = np.mean((preq[:, pos] - targets[:, pos]) ** 2, axis=0)
    sub_train = train.columns(chosen)
    sub_test = test.columns(chosen).values
    out = {}
    for name in allocators or [cfg.allocator_name]:
        w = np.asarray(allocate(name, sub_train, cfg, seed, mse), dtype=float)
        out[name] = StepRecord(step, start, list(chosen), [float(v) for v in w], sub_test @ w)
    return out


def _failure(exc: Exception) -> str:
    return f"failed: {type(exc).__name__}: {exc}"


def simulate_one_step(data: ReturnsMatrix, cfg: ExperimentConfig, sim: int, allocators=None) -> dict[str, SimRecord]:
    seed = cfg.seed + sim
    names = allocators or [cfg.allocator_name]
    start = cfg.offset + cfg.train_len
    try:
        steps = run_decision(data, start, cfg, seed, 0, names)
    except PsemError as exc:
        return {n: SimRecord(sim, seed, _failure(exc)) for n in names}
    return {n: SimRecord(sim, seed, "ok", metric_report(s.daily, cfg.days_per_month, "1m"), [s])
            for n, s in steps.items()}


def simulate_sequence(data: ReturnsMatrix, cfg: ExperimentConfig, allocators=None) -> dict[str, SimRecord]:
    names = allocators or [cfg.allocator_name]
    steps = {n: [] for n in names}
    status = "ok"
    for h in range(cfg.horizon_months):
        start = cfg.offset + cfg.train_len + h * cfg.days_per_month
        try:
            rec = run_decision(data, start, cfg, cfg.seed + h, h, names)
        except PsemError as exc:
            status = f"{_failure(exc)} (month {h}, partial)"
            break
        for n in names:
            steps[n].append(rec[n])
    out = {}
    for n in names:
        report = None
        if steps[n]:
            daily = np.concatenate([s.daily for s in steps[n]])
            report = metric_report(daily, cfg.days_per_month, f"{len(steps[n])}m")
        out[n] = SimRecord(0, cfg.seed, status, report, steps[n])
    return out


def _task(args):
    data, cfg, sim, allocators = args
    if sim is None:
        return simulate_sequence(data, cfg, allocators)
    return simulate_one_step(data, cfg, sim, allocators)


def _map(tasks, parallel: int):
    if parallel <= 1 or len(tasks) <= 1:
        return [_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * parallel))))


def _check_length(data: ReturnsMatrix, cfg: ExperimentConfig, months: int) -> None:
    need = required_rows(cfg, months)
    if data.n_rows < need:
        raise OutOfRange(f"data has {data.n_rows} rows, experiment needs {need}")


def run_configs(data: ReturnsMatrix, cfgs, parallel: int = 1, allocators=None) -> list[dict[str, RunResult]]:
    """Run every config (one-step if horizon_months == 1, else multi-step).

    Returns, per config, a mapping allocator name -> RunResult. Work is
    split into independent simulation tasks, so results do not depend on
    ``parallel``.
    """
    tasks, owners = [], []
    for i, cfg in enumerate(cfgs):
        cfg.validate()
        if cfg.horizon_months == 1:
            _check_length(data, cfg, 1)
            for k in range(cfg.n_simulations):
                tasks.append((data, cfg, k, allocators))
                owners.append(i)
        else:
            _check_length(data, cfg, cfg.horizon_months)
            tasks.append((data, cfg, None, allocators))
            owners.append(i)
    t0 = time.perf_counter()
    done = _map(tasks, parallel)
    elapsed = time.perf_counter() - t0
    per_cfg: list[dict[str, list[SimRecord]]] = [dict() for _ in cfgs]
    for i, recs in zip(owners, done):
        for name, rec in recs.items():
            per_cfg[i].setdefault(name, []).append(rec)
    results = []
    for i, cfg in enumerate(cfgs):
        kind = "one_step" if cfg.horizon_months == 1 else "multi_step"
        results.append({
            name: RunResult(cfg if allocators is None else cfg.with_(allocator_name=name), kind, sims,
                            elapsed / max(1, len(cfgs)), i)
            for name, sims in per_cfg[i].items()
        })
    return results


def one_step_experiment(data: ReturnsMatrix, cfg: ExperimentConfig, parallel: int = 1) -> RunResult:
    """Single decision repeated over ``n_simulations`` seeds."""
    cfg = cfg.with_(horizon_months=1)
    res = run_configs(data, [cfg], parallel)[0][cfg.allocator_name]
    if res.sims and all(not s.ok for s in res.sims):
        log.error("all %d simulations failed", len(res.sims))
    return res


def multi_step_experiment(data: ReturnsMatrix, cfg: ExperimentConfig) -> RunResult:
    """``horizon_months`` sequential monthly decisions, metrics on the joined path."""
    _check_length(data, cfg, cfg.horizon_months)
    cfg.validate()
    t0 = time.perf_counter()
    rec = simulate_sequence(data, cfg)[cfg.allocator_name]
    return RunResult(cfg, "multi_step", [rec], time.perf_counter() - t0)


def expand_grid(grid: dict, base: ExperimentConfig | None = None) -> list[ExperimentConfig]:
    base = base or ExperimentConfig()
    if not grid:
        raise ValueError("empty grid")
    keys = list(grid)
    values = [v if isinstance(v, (list, tuple)) else [v] for v in (grid[k] for k in keys)]
    if any(len(v) == 0 for v in values):
        raise ValueError("grid lists must be non-empty")
    return [ExperimentConfig.from_dict({**base.to_dict(), **dict(zip(keys, combo))})
            for combo in itertools.product(*values)]


def _sort_key(res: RunResult):
    m = res.mean("modified_sharpe")
    return (math.isnan(m), -m if not math.isnan(m) else 0.0, res.config_id)


def grid_search(data: ReturnsMatrix, grid: dict, base: ExperimentConfig | None = None,
                parallel: int = 1) -> list[RunResult]:
    """Run the Cartesian product of ``grid`` over ``base``; best mean modified Sharpe first."""
    cfgs = expand_grid(grid, base)
    results = [r[c.allocator_name] for r, c in zip(run_configs(data, cfgs, parallel), cfgs)]
    return sorted(results, key=_sort_key)


def sharpe_table(results, metric: str = "modified_sharpe") -> pd.DataFrame:
    """Mean metric pivoted as M (rows) x epsilon (columns)."""
    rows = [{"M": r.config.M, "epsilon": r.config.epsilon, "value": r.mean(metric)} for r in results]
    frame = pd.DataFrame(rows)
    return frame.pivot_table(index="M", columns="epsilon", values="value", aggfunc="mean")


# ---------------------------------------------------------------- reporting

def _num(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


RESULT_COLUMNS = ["config_id", "allocator", "sim", "seed", "status", "epsilon", "gamma", "threshold_T", "M",
                  "lambda_s", "basis_kind", "horizon_months", *METRICS, "selected"]


def write_results(results, out_dir) -> dict[str, str]:
    """results.csv, summary.json, weights_history.csv and plot_long.csv."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, k) for k in
             ("results.csv", "summary.json", "weights_history.csv", "plot_long.csv")}

    with open(paths["results.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for res in results:
            c = res.config
            for s in res.sims:
                metrics = [_num(getattr(s.report, m)) if s.report else "" for m in METRICS]
                sel = ";".join(s.steps[-1].selected) if s.steps else ""
                w.writerow([res.config_id, c.allocator_name, s.sim, s.seed, s.status, _num(c.epsilon),
                            _num(c.gamma), _num(c.threshold_T), c.M, _num(c.lambda_s), c.basis_kind,
                            c.horizon_months, *metrics, sel])

    with open(paths["weights_history.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_id", "allocator", "sim", "step", "start_row", "asset_id", "weight"])
        for res in results:
            for s in res.sims:
                for st in s.steps:
                    for a, wt in zip(st.selected, st.weights):
                        w.writerow([res.config_id, res.config.allocator_name, s.sim, st.step, st.start, a, _num(wt)])

    with open(paths["plot_long.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["M", "epsilon", "gamma", "T", "metric", "value"])
        for res in results:
            c = res.config
            for m, agg in res.aggregate.items():
                w.writerow([c.M, _num(c.epsilon), _num(c.gamma), _num(c.threshold_T), m, _num(agg["mean"])])

    summary = [{
        "config_id": res.config_id,
        "kind": res.kind,
        "config": res.config.to_dict(),
        "aggregate": res.aggregate,
        "n_simulations": len(res.sims),
        "n_failed": res.n_failed,
        "partial": res.partial,
    } for res in results]
    with open(paths["summary.json"], "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


# ---------------------------------------------------------------- comparison

COMPARE_METHODS = ("s-rbfn", "inverse_vol", "cvar_rp", "max_div", "hrp", "herc", "equal")
COMPARE_LABELS = {"s-rbfn": "s-RBFN", "inverse_vol": "IV", "cvar_rp": "CVaR RP", "max_div": "MD",
                  "hrp": "HRP", "herc": "HERC", "equal": "1/N"}


def compare_methods(data: ReturnsMatrix, base: ExperimentConfig, gammas, thresholds, epsilons, Ms,
                    parallel: int = 1) -> tuple[pd.DataFrame, list[RunResult]]:
    """Average annualised Sharpe per (gamma, T) for s-RBFN and every baseline.

    Each (gamma, T, M, epsilon) cell is a multi-step run with monthly
    reallocation; all methods in a cell share ranking and selection.
    Baselines do not depend on epsilon, so they are run once per
    (gamma, T, M), which weights them the same as repeating across epsilon.
    """
    cells = list(itertools.product(gammas, thresholds, Ms))
    first = [base.with_(gamma=g, threshold_T=t, M=m, epsilon=epsilons[0]) for g, t, m in cells]
    rest = [c.with_(epsilon=e) for c in first for e in epsilons[1:]]
    rows, results = [], []
    for res in run_configs(data, first, parallel, list(COMPARE_METHODS)):
        results.extend(res[n] for n in COMPARE_METHODS)
    if rest:
        results.extend(r["s-rbfn"] for r in run_configs(data, rest, parallel, ["s-rbfn"]))
    for r in results:
        c = r.config
        rows.append({"gamma": c.gamma, "T": c.threshold_T, "method": COMPARE_LABELS[c.allocator_name],
                     "value": r.mean("annualized_sharpe")})
    table = pd.DataFrame(rows).pivot_table(index=["gamma", "T"], columns="method", values="value",
                                           aggfunc="mean", dropna=False)
    table = table.reindex(columns=[COMPARE_LABELS[n] for n in COMPARE_METHODS])
    avg = table.mean(axis=0).to_frame().T
    avg.index = pd.MultiIndex.from_tuples([("Avg.", "")], names=["gamma", "T"])
    return pd.concat([table, avg]), results
