"""Two-layer tanh predictors, one per asset.

A predictor maps a lag window of ``L`` returns to the return ``tau`` steps
ahead: ``f(x) = w2 . tanh(w1 x + b1) + b2`` (linear output head). Training is
plain per-instance SGD on the squared error with an L2 term scaled by
``lambda_p / n_total`` and a per-predictor modulation factor ``delta``.

All arithmetic is done on stacks of predictors (leading axis = predictor)
so that a whole universe trains in one vectorised loop; the single-predictor
functions are thin wrappers over a stack of one, which keeps both paths
bit-identical.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DivergedTraining, InvalidParameter, NonFiniteGradient, NonFiniteInput


@dataclass(frozen=True)
class PredictorConfig:
    kappa: int = 20
    eta: float = 0.03
    chi: float = 0.01
    lambda_p: float = 0.0
    tau: int = 1
    lag_window: int = 1
    seed: int = 0
    epochs: int = 1

    def validate(self) -> "PredictorConfig":
        if self.kappa < 1:
            raise InvalidParameter("kappa must be >= 1")
        if not self.eta > 0:
            raise InvalidParameter("eta must be > 0")
        if self.lambda_p < 0:
            raise InvalidParameter("lambda_p must be >= 0")
        if self.tau < 1 or self.lag_window < 1 or self.epochs < 1:
            raise InvalidParameter("tau, lag_window and epochs must be >= 1")
        if self.chi < 0:
            raise InvalidParameter("chi must be >= 0")
        return self


@dataclass
class PredictorParams:
    w1: np.ndarray  # kappa x L
    b1: np.ndarray  # kappa
    w2: np.ndarray  # 1 x kappa
    b2: float

    @property
    def kappa(self) -> int:
        return self.w1.shape[0]

    @property
    def L(self) -> int:
        return self.w1.shape[1]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), [self.b2]])

    @classmethod
    def from_flat(cls, theta, kappa: int, L: int) -> "PredictorParams":
        theta = np.asarray(theta, dtype=float)
        i = kappa * L
        return cls(
            theta[:i].reshape(kappa, L).copy(),
            theta[i:i + kappa].copy(),
            theta[i + kappa:i + 2 * kappa].reshape(1, kappa).copy(),
            float(theta[-1]),
        )

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "L": self.L,
            "w1": self.w1.ravel().tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.ravel().tolist(),
            "b2": float(self.b2),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorParams":
        k, L = int(d["kappa"]), int(d["L"])
        return cls(
            np.asarray(d["w1"], dtype=float).reshape(k, L),
            np.asarray(d["b1"], dtype=float).reshape(k),
            np.asarray(d["w2"], dtype=float).reshape(1, k),
            float(d["b2"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "PredictorParams":
        return cls.from_dict(json.loads(text))


def init_predictor(cfg: PredictorConfig, stream: int | None = None) -> PredictorParams:
    """Uniform [-1, 1] draws scaled by ``chi``.

    ``stream`` selects an independent generator derived from ``cfg.seed`` so
    that many predictors can be initialised from one base seed.
    """
    if stream is None:
        rng = np.random.default_rng(cfg.seed)
    else:
        rng = np.random.default_rng([cfg.seed, *np.atleast_1d(stream).tolist()])
    k, L = cfg.kappa, cfg.lag_window
    w1 = rng.uniform(-1.0, 1.0, (k, L)) * cfg.chi
    b1 = rng.uniform(-1.0, 1.0, k) * cfg.chi
    w2 = rng.uniform(-1.0, 1.0, (1, k)) * cfg.chi
    b2 = float(rng.uniform(-1.0, 1.0) * cfg.chi)
    return PredictorParams(w1, b1, w2, b2)


class PredictorStack:
    """M predictors of identical shape stored as stacked arrays (updated in place)."""

    def __init__(self, w1, b1, w2, b2):
        self.w1 = np.array(w1, dtype=float)  # M x kappa x L
        self.b1 = np.array(b1, dtype=float)  # M x kappa
        self.w2 = np.array(w2, dtype=float)  # M x kappa
        self.b2 = np.array(b2, dtype=float)  # M

    @classmethod
    def from_params(cls, params) -> "PredictorStack":
        return cls(
            np.stack([p.w1 for p in params]),
            np.stack([p.b1 for p in params]),
            np.stack([p.w2[0] for p in params]),
            np.array([p.b2 for p in params], dtype=float),
        )

    @classmethod
    def init(cls, cfg: PredictorConfig, streams) -> "PredictorStack":
        return cls.from_params([init_predictor(cfg, s) for s in streams])

    def __len__(self) -> int:
        return self.w1.shape[0]

    def unstack(self) -> list[PredictorParams]:
        return [
            PredictorParams(self.w1[j].copy(), self.b1[j].copy(), self.w2[j][None, :].copy(), float(self.b2[j]))
            for j in range(len(self))
        ]

    def _hidden(self, x):
        return np.tanh(np.einsum("mkl,ml->mk", self.w1, x) + self.b1)

    def forward(self, x) -> np.ndarray:
        """x: M x L lag windows -> M predictions."""
        h = self._hidden(x)
        return np.einsum("mk,mk->m", self.w2, h) + self.b2

    def gradients(self, x, y):
        """Exact backprop of (f - y)^2 for every member; returns (pred, grads)."""
        h = self._hidden(x)
        pred = np.einsum("mk,mk->m", self.w2, h) + self.b2
        g = 2.0 * (pred - y)
        gw2 = g[:, None] * h
        da = g[:, None] * self.w2 * (1.0 - h * h)
        gw1 = da[:, :, None] * x[:, None, :]
        return pred, (gw1, da, gw2, g)

    def step(self, x, y, eta, lambda_p, n_total, delta) -> np.ndarray:
        """One modulated SGD update of every member; returns pre-update predictions."""
        pred, grads = self.gradients(x, y)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise NonFiniteGradient("non-finite gradient; reduce eta")
        self.apply(grads, eta, lambda_p, n_total, delta)
        return pred

    def apply(self, grads, eta, lambda_p, n_total, delta) -> None:
        gw1, gb1, gw2, gb2 = grads
        decay = lambda_p / n_total
        s = eta * np.asarray(delta, dtype=float)
        self.w1 -= s[:, None, None] * (gw1 + decay * self.w1)
        self.b1 -= s[:, None] * (gb1 + decay * self.b1)
        self.w2 -= s[:, None] * (gw2 + decay * self.w2)
        self.b2 -= s * (gb2 + decay * self.b2)

    def recurrent_forecast(self, history, horizon: int) -> np.ndarray:
        """Roll each member forward ``horizon`` steps, feeding predictions back in."""
        window = np.array(history, dtype=float)  # M x L
        growth = np.ones(len(self))
        for _ in range(horizon):
            r = self.forward(window)
            if not np.all(np.isfinite(r)):
                raise NonFiniteInput("recurrent forecast diverged")
            growth *= 1.0 + r
            window = np.concatenate([window[:, 1:], r[:, None]], axis=1)
        return growth - 1.0


def _single(p: PredictorParams) -> PredictorStack:
    return PredictorStack(p.w1[None], p.b1[None], p.w2, np.array([p.b2]))


def _window(p: PredictorParams, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (p.L,):
        raise NonFiniteInput(f"expected a window of length {p.L}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("input window contains non-finite values")
    return x[None, :]


def forward(p: PredictorParams, x) -> float:
    return float(_single(p).forward(_window(p, x))[0])


def gradient(p: PredictorParams, x, y: float) -> PredictorParams:
    """Gradient of (f(x) - y)^2 with the same layout as the parameters."""
    _, (gw1, gb1, gw2, gb2) = _single(p).gradients(_window(p, x), np.array([y], dtype=float))
    return PredictorParams(gw1[0], gb1[0], gw2, float(gb2[0]))


def sgd_step(p: PredictorParams, x, y: float, eta: float, lambda_p: float,
             n_total: int, delta: float) -> PredictorParams:
    if not 0.0 <= delta <= 1.0:
        raise InvalidParameter("delta must lie in [0, 1]")
    if not np.isfinite(y):
        raise NonFiniteInput("target is not finite")
    st = _single(p)
    st.step(_window(p, x), np.array([y], dtype=float), eta, lambda_p, n_total, np.array([delta]))
    return st.unstack()[0]


def recurrent_forecast(p: PredictorParams, history, horizon: int) -> float:
    if horizon < 0:
        raise InvalidParameter("horizon must be >= 0")
    hist = np.asarray(history, dtype=float)[-p.L:]
    return float(_single(p).recurrent_forecast(hist[None, :], horizon)[0])


def lagged_instances(values: np.ndarray, lag_window: int, tau: int):
    """Inputs (n x M x L) and targets (n x M) for every usable instance.

    Instance i uses rows i .. i+L-1 as input and row i+L-1+tau as target.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0] - lag_window - tau + 1
    if n < 1:
        raise InvalidParameter(
            f"{values.shape[0]} rows cannot supply a window of {lag_window} plus lag {tau}"
        )
    win = np.lib.stride_tricks.sliding_window_view(values, lag_window, axis=0)  # rows x M x L
    return win[:n], values[lag_window - 1 + tau:lag_window - 1 + tau + n]


def sgd_pass(stack: PredictorStack, inputs, targets, cfg: PredictorConfig, delta_fn=None,
             delta_log=None) -> np.ndarray:
    """Per-instance SGD over ``cfg.epochs`` passes.

    ``delta_fn(losses) -> deltas`` supplies the per-member modulation; None
    means every member is updated fully. Returns the pre-update predictions
    of the final pass (n x M).
    """
    n, m = targets.shape
    preds = np.empty((n, m))
    ones = np.ones(m)
    # overflow is detected explicitly below, so numpy's warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.epochs):
            for i in range(n):
                x, y = inputs[i], targets[i]
                pred, grads = stack.gradients(x, y)
                if not np.all(np.isfinite(pred)):
                    raise DivergedTraining(f"predictions became non-finite at instance {i}; reduce eta")
                delta = ones if delta_fn is None else delta_fn((pred - y) ** 2)
                if delta_log is not None:
                    delta_log.append(np.array(delta, dtype=float))
                stack.apply(grads, cfg.eta, cfg.lambda_p, n, delta)
                preds[i] = pred
    for arr in (stack.w1, stack.w2, stack.b1, stack.b2):
        if not np.all(np.isfinite(arr)):
            raise DivergedTraining("parameters became non-finite; reduce eta")
    return preds


def train_independent(values: np.ndarray, cfg: PredictorConfig, role: int = 0):
    """Train one predictor per column with full (delta = 1) updates.

    Returns (stack, prequential predictions, targets). The predictions are
    made before each update, so they are honest one-step-ahead forecasts.
    """
    cfg.validate()
    inputs, targets = lagged_instances(values, cfg.lag_window, cfg.tau)
    stack = PredictorStack.init(cfg, [(role, j) for j in range(targets.shape[1])])
    preds = sgd_pass(stack, inputs, targets, cfg)
    return stack, preds, targets
