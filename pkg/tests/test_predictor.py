import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psem.errors import DivergedTraining, InvalidParameter, NonFiniteInput
from oracles import fd_gradient, max_rel_err
from psem.predictor import (
    PredictorConfig,
    PredictorParams,
    PredictorStack,
    forward,
    gradient,
    init_predictor,
    lagged_instances,
    recurrent_forecast,
    sgd_pass,
    sgd_step,
    train_independent,
)


def _unit():
    return PredictorParams(np.array([[1.0]]), np.array([0.0]), np.array([[1.0]]), 0.0)


def _random_params(rng, kappa, L, scale=1.0):
    return PredictorParams(rng.normal(0, scale, (kappa, L)), rng.normal(0, scale, kappa),
                           rng.normal(0, scale, (1, kappa)), float(rng.normal(0, scale)))


def test_init_examples():
    zero = init_predictor(PredictorConfig(chi=0.0))
    assert not np.any(zero.flat())
    cfg = PredictorConfig(kappa=20, lag_window=1, chi=0.01, seed=4)
    a, b = init_predictor(cfg), init_predictor(cfg)
    assert np.array_equal(a.flat(), b.flat())
    assert np.all(np.abs(a.flat()) <= 0.01)
    assert a.w1.shape == (20, 1) and a.w2.shape == (1, 20)
    assert not np.array_equal(init_predictor(cfg, 0).flat(), init_predictor(cfg, 1).flat())


def test_forward_examples():
    zero = init_predictor(PredictorConfig(chi=0.0, kappa=5, lag_window=3))
    assert forward(zero, [0.3, -1.0, 2.0]) == 0.0
    assert forward(_unit(), [0.0]) == 0.0
    assert forward(_unit(), [10.0]) == pytest.approx(0.9999999958, abs=1e-10)
    assert forward(_unit(), [10.0]) == math.tanh(10.0)


def test_forward_rejects_bad_input():
    with pytest.raises(NonFiniteInput):
        forward(_unit(), [np.nan])
    with pytest.raises(NonFiniteInput):
        forward(_unit(), [0.1, 0.2])


def test_sgd_delta_zero_and_linearity(rng):
    p = _random_params(rng, 4, 2)
    x, y = [0.3, -0.2], 0.05
    same = sgd_step(p, x, y, 0.1, 0.01, 100, 0.0)
    assert np.array_equal(same.flat(), p.flat())
    full = sgd_step(p, x, y, 0.1, 0.01, 100, 1.0).flat() - p.flat()
    half = sgd_step(p, x, y, 0.1, 0.01, 100, 0.5).flat() - p.flat()
    assert np.allclose(half, 0.5 * full, rtol=1e-12, atol=1e-16)
    with pytest.raises(InvalidParameter):
        sgd_step(p, x, y, 0.1, 0.0, 100, 1.5)


def test_sgd_update_rule_matches_formula(rng):
    p = _random_params(rng, 3, 1)
    x, y, eta, lam, n, d = [0.4], -0.1, 0.05, 0.07, 50, 0.8
    g = gradient(p, x, y).flat()
    expect = p.flat() - eta * (g + lam / n * p.flat()) * d
    assert np.allclose(sgd_step(p, x, y, eta, lam, n, d).flat(), expect, rtol=0, atol=1e-15)


def test_gradient_kappa2_fd(rng):
    p = _random_params(rng, 2, 1)
    x, y = [0.7], 0.2
    assert max_rel_err(gradient(p, x, y).flat(), fd_gradient(p, x, y)) < 1e-5


def test_gradient_fd_random_draws():
    # losses reach ~25 here, so the two-point rule at h=1e-6 carries ~1e-9
    # roundoff; the five-point rule at h=1e-4 keeps the oracle itself exact enough
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        kappa, L = int(rng.integers(1, 8)), int(rng.integers(1, 4))
        p = _random_params(rng, kappa, L)
        x, y = rng.normal(size=L), float(rng.normal())
        worst = max(worst, max_rel_err(gradient(p, x, y).flat(), fd_gradient(p, x, y, 1e-4, 4)))
    assert worst < 1e-4


def test_small_step_decreases_loss():
    rng = np.random.default_rng(1)
    wins = 0
    for _ in range(500):
        p = _random_params(rng, 5, 1, 0.5)
        x, y = rng.standard_normal(1), float(rng.standard_normal())
        before = (forward(p, x) - y) ** 2
        after = (forward(sgd_step(p, x, y, 1e-3, 0.0, 1, 1.0), x) - y) ** 2
        wins += after < before
    assert wins / 500 >= 0.99


def test_recurrent_forecast_examples():
    zero = init_predictor(PredictorConfig(chi=0.0))
    assert recurrent_forecast(zero, [0.02], 21) == 0.0
    assert recurrent_forecast(_unit(), [0.5], 0) == 0.0
    r1 = math.tanh(0.01)
    r2 = math.tanh(r1)
    assert recurrent_forecast(_unit(), [0.01], 2) == pytest.approx((1 + r1) * (1 + r2) - 1, abs=1e-15)
    with pytest.raises(InvalidParameter):
        recurrent_forecast(_unit(), [0.01], -1)


def test_recurrent_forecast_window_shift():
    # L = 2: the second step sees [x1, r1]
    p = PredictorParams(np.array([[1.0, 2.0]]), np.array([0.0]), np.array([[1.0]]), 0.0)
    r1 = math.tanh(0.1 + 2 * 0.2)
    r2 = math.tanh(0.2 + 2 * r1)
    assert recurrent_forecast(p, [0.1, 0.2], 2) == pytest.approx((1 + r1) * (1 + r2) - 1, abs=1e-15)


def test_params_json_roundtrip(rng):
    p = _random_params(rng, 3, 2)
    d = json.loads(p.to_json())
    assert set(d) == {"kappa", "L", "w1", "b1", "w2", "b2"}
    assert np.array_equal(PredictorParams.from_json(p.to_json()).flat(), p.flat())


def test_config_validation():
    for bad in ({"kappa": 0}, {"eta": 0.0}, {"lambda_p": -1.0}, {"tau": 0}, {"lag_window": 0}):
        with pytest.raises(InvalidParameter):
            PredictorConfig(**bad).validate()


def test_lagged_instances_alignment():
    v = np.arange(20.0).reshape(10, 2)
    x, y = lagged_instances(v, 3, 2)
    assert x.shape == (6, 2, 3) and y.shape == (6, 2)
    # instance 0: rows 0..2 in, row 4 out
    assert np.array_equal(x[0, 1], v[0:3, 1])
    assert np.array_equal(y[0], v[4])
    with pytest.raises(InvalidParameter):
        lagged_instances(v, 9, 2)


def test_stack_matches_single_predictors(rng):
    params = [_random_params(rng, 4, 2) for _ in range(3)]
    stack = PredictorStack.from_params(params)
    x = rng.normal(size=(3, 2))
    assert np.allclose(stack.forward(x), [forward(p, xi) for p, xi in zip(params, x)], rtol=0, atol=1e-15)
    for p, q in zip(params, stack.unstack()):
        assert np.array_equal(p.flat(), q.flat())


def test_sgd_pass_records_pre_update_predictions(rng):
    v = rng.normal(0, 0.01, (30, 2))
    cfg = PredictorConfig(kappa=3, chi=0.5, eta=0.1, seed=2)
    stack = PredictorStack.init(cfg, [0, 1])
    first = stack.forward(v[0][:, None])
    x, y = lagged_instances(v, 1, 1)
    preds = sgd_pass(stack, x, y, cfg)
    assert np.array_equal(preds[0], first)


def test_train_independent_diverges_loudly():
    v = np.random.default_rng(0).normal(0, 1.0, (200, 2))
    with pytest.raises(DivergedTraining), np.errstate(all="ignore"):
        train_independent(v * 1e3, PredictorConfig(kappa=50, eta=0.3, chi=1.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.floats(0, 1), st.integers(0, 2**31))
def test_delta_linearity_property(kappa, L, delta, seed):
    rng = np.random.default_rng(seed)
    p = _random_params(rng, kappa, L)
    x, y = rng.normal(size=L), float(rng.normal())
    full = sgd_step(p, x, y, 0.05, 0.0, 10, 1.0).flat() - p.flat()
    part = sgd_step(p, x, y, 0.05, 0.0, 10, delta).flat() - p.flat()
    assert np.allclose(part, delta * full, rtol=1e-9, atol=1e-14)
