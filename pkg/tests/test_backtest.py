import csv
import json
import math

import numpy as np
import pytest

from psem import backtest
from psem.backtest import (
    COMPARE_LABELS,
    compare_methods,
    expand_grid,
    grid_search,
    multi_step_experiment,
    one_step_experiment,
    run_configs,
    sharpe_table,
    write_results,
)
from psem.config import REFERENCE_GRID, ExperimentConfig
from psem.errors import InsufficientCandidates, InvalidParameter, OutOfRange
from psem.market_data import synth_universe

import make_golden

BASE = ExperimentConfig(M=5, n_simulations=3, threshold_T=-1.0, train_len=120)


@pytest.fixture(scope="module")
def data():
    return synth_universe(12, 120 + 12 * 21, corr=0.4, seed=1)


def _weights(res):
    return [np.array(st.weights) for s in res.sims for st in s.steps]


def test_one_step_deterministic(data):
    cfg = BASE.with_(n_simulations=1, gamma=1)
    a, b = one_step_experiment(data, cfg), one_step_experiment(data, cfg)
    assert a.sims[0].report == b.sims[0].report
    assert _weights(a)[0].tobytes() == _weights(b)[0].tobytes()
    assert a.kind == "one_step" and len(a.sims) == 1


def test_simulation_seeds_vary(data):
    res = one_step_experiment(data, BASE.with_(gamma=2))
    assert [s.seed for s in res.sims] == [0, 1, 2]
    assert len({tuple(s.steps[0].selected) for s in res.sims} | {None}) >= 2


def test_equal_allocator_bypass(data):
    for eps in (0.0, 0.35):
        res = one_step_experiment(data, BASE.with_(allocator_name="equal", epsilon=eps))
        for w in _weights(res):
            assert np.array_equal(w, np.full(5, 0.2))


@pytest.mark.parametrize("name", ["inverse_vol", "hrp", "mse_weighted"])
def test_baseline_ignores_epsilon(data, name):
    a = one_step_experiment(data, BASE.with_(allocator_name=name, epsilon=0.0, gamma=2))
    b = one_step_experiment(data, BASE.with_(allocator_name=name, epsilon=0.5, gamma=2))
    for wa, wb in zip(_weights(a), _weights(b)):
        assert np.array_equal(wa, wb)


def test_srbfn_weights_on_simplex(data):
    res = one_step_experiment(data, BASE)
    for w in _weights(res):
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


def test_multi_step_history(data):
    res = multi_step_experiment(data, BASE.with_(horizon_months=10))
    sim = res.sims[0]
    assert sim.ok and len(sim.steps) == 10
    assert [s.start for s in sim.steps] == [120 + 21 * h for h in range(10)]
    for s in sim.steps:
        w = np.array(s.weights)
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
    daily = np.concatenate([s.daily for s in sim.steps])
    assert sim.report.modified_sharpe == pytest.approx(
        (np.prod(1 + daily) - 1) / np.std(daily), rel=1e-12)


def test_horizon_one_matches_one_step(data):
    for seed in (0, 5):
        cfg = BASE.with_(n_simulations=1, seed=seed, gamma=2)
        one = one_step_experiment(data, cfg).sims[0]
        multi = multi_step_experiment(data, cfg.with_(horizon_months=1)).sims[0]
        assert one.report == multi.report
        assert one.steps[0].weights == multi.steps[0].weights


def test_twenty_four_month_protocol():
    data = synth_universe(10, 60 + 24 * 21, seed=2)
    res = multi_step_experiment(data, BASE.with_(train_len=60, horizon_months=24, allocator_name="equal"))
    sim = res.sims[0]
    assert len(sim.steps) == 24
    daily = np.concatenate([s.daily for s in sim.steps])
    monthly = np.prod(1 + daily.reshape(24, 21), axis=1) - 1
    assert sim.report.annualized_sharpe == pytest.approx(monthly.mean() / monthly.std() * math.sqrt(12), rel=1e-12)


def test_failed_simulations_are_recorded(data):
    res = one_step_experiment(data, BASE.with_(threshold_T=10.0))
    assert res.n_failed == 3 and res.partial
    assert all("InsufficientCandidates" in s.status for s in res.sims)
    assert math.isnan(res.mean())


def test_failed_month_aborts_sequence(data, monkeypatch):
    real = backtest.run_decision

    def flaky(d, start, cfg, seed, step=0, allocators=None):
        if step == 2:
            raise InsufficientCandidates("forced")
        return real(d, start, cfg, seed, step, allocators)

    monkeypatch.setattr(backtest, "run_decision", flaky)
    sim = multi_step_experiment(data, BASE.with_(horizon_months=5)).sims[0]
    assert not sim.ok and "month 2, partial" in sim.status
    assert len(sim.steps) == 2 and sim.report is not None


def test_data_too_short(data):
    with pytest.raises(OutOfRange):
        multi_step_experiment(data, BASE.with_(horizon_months=50))


def test_golden_multi_step():
    with open(make_golden.GOLDEN) as fh:
        golden = json.load(fh)
    now = make_golden.snapshot(make_golden.run())
    assert now["status"] == golden["status"] == "ok"
    assert [s["selected"] for s in now["steps"]] == [s["selected"] for s in golden["steps"]]
    for a, b in zip(now["steps"], golden["steps"]):
        assert np.allclose([float(v) for v in a["weights"]], [float(v) for v in b["weights"]], rtol=1e-10, atol=0)
    for k, v in golden["metrics"].items():
        assert float(now["metrics"][k]) == pytest.approx(float(v), rel=1e-10)


def test_parallel_matches_serial(data):
    cfgs = [BASE, BASE.with_(epsilon=0.35)]
    serial = run_configs(data, cfgs, parallel=1)
    par = run_configs(data, cfgs, parallel=2)
    for a, b in zip(serial, par):
        ra, rb = a["s-rbfn"], b["s-rbfn"]
        assert [repr(s.report) for s in ra.sims] == [repr(s.report) for s in rb.sims]


def test_grid_expansion_and_sorting(data):
    assert len(expand_grid({"M": [5]}, BASE)) == 1
    cfgs = expand_grid({"epsilon": [0.0, 0.35], "M": [3, 5]}, BASE)
    assert len(cfgs) == 4 and len(set(cfgs)) == 4
    with pytest.raises(InvalidParameter):
        expand_grid({"bogus": [1]}, BASE)
    results = grid_search(data, {"epsilon": [0.0, 0.35], "M": [3, 5]}, BASE)
    means = [r.mean() for r in results]
    assert means == sorted(means, reverse=True)
    table = sharpe_table(results)
    assert list(table.index) == [3, 5] and list(table.columns) == [0.0, 0.35]


def test_write_results(tmp_path, data):
    res = one_step_experiment(data, BASE)
    failed = one_step_experiment(data, BASE.with_(threshold_T=10.0))
    paths = write_results([res, failed], tmp_path)
    rows = list(csv.DictReader(open(paths["results.csv"])))
    assert len(rows) == 6
    assert rows[0]["status"] == "ok" and rows[3]["modified_sharpe"] == ""
    summary = json.load(open(paths["summary.json"]))
    assert summary[1]["aggregate"]["modified_sharpe"]["mean"] is None
    agg = summary[0]["aggregate"]["modified_sharpe"]
    vals = [float(r["modified_sharpe"]) for r in rows[:3]]
    assert agg["mean"] == pytest.approx(np.mean(vals), rel=1e-12)
    assert agg["std"] == pytest.approx(np.std(vals), rel=1e-12)
    long = list(csv.reader(open(paths["plot_long.csv"])))
    assert long[0] == ["M", "epsilon", "gamma", "T", "metric", "value"]
    weights = list(csv.DictReader(open(paths["weights_history.csv"])))
    assert len(weights) == 3 * 5


def test_compare_table(data):
    table, results = compare_methods(data, BASE.with_(horizon_months=3), gammas=[1, 2], thresholds=[-1.0], epsilons=[0.0, 0.1],
                                     Ms=[3], parallel=1)
    assert list(table.columns) == ["s-RBFN", "IV", "CVaR RP", "MD", "HRP", "HERC", "1/N"]
    assert table.index[-1] == ("Avg.", "")
    assert len(table) == 3
    assert np.all(np.isfinite(table.to_numpy()))
    # the 1/N column is the equal-weight run of the same cell
    for g in (1, 2):
        eq = [r for r in results if r.config.allocator_name == "equal" and r.config.gamma == g]
        assert table.loc[(g, -1.0), COMPARE_LABELS["equal"]] == pytest.approx(eq[0].mean("annualized_sharpe"))


def test_config_validation():
    with pytest.raises(InvalidParameter):
        ExperimentConfig(epsilon=1.5).validate()
    with pytest.raises(InvalidParameter):
        ExperimentConfig(kappa=30).validate(allow_extended=False)
    ExperimentConfig(kappa=30).validate(allow_extended=True)
    with pytest.raises(InvalidParameter):
        ExperimentConfig.from_dict({"M": 5, "colour": "red"})
    for key, values in REFERENCE_GRID.items():
        for v in values:
            ExperimentConfig(**{key: v}).validate(allow_extended=False)
