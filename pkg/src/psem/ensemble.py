"""Structured ensemble: diversity-modulated training and the s-RBFN combiner.

The predictors of the selected assets are trained jointly, one instance at a
time. At each instance the member with the smallest squared error is
updated with weight ``1 - epsilon`` and every other member with
``epsilon / (M - 1)``. The recorded (pre-update) predictions form the
structured dataset, which is passed through a per-column basis function and
regressed by ridge least squares onto the equal-weighted portfolio. The
clipped and renormalised coefficients are the portfolio weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg

from .errors import DegenerateColumn, InvalidParameter, ShapeMismatch, SingularSystem
from .market_data import ReturnsMatrix
from .predictor import PredictorConfig, PredictorStack, lagged_instances, sgd_pass

BASIS_KINDS = ("gaussian", "radial")
SIGMA_FLOOR = 1e-8


@dataclass
class StructuredDataset:
    values: np.ndarray  # n x M pre-update predictions
    epsilon: float
    asset_ids: list[str]
    targets: np.ndarray | None = None  # n x M realised returns the rows predict
    timestamps: np.ndarray | None = None  # timestamps of the predicted rows

    def to_dict(self) -> dict:
        d = {"epsilon": float(self.epsilon), "asset_ids": list(self.asset_ids),
             "values": self.values.tolist()}
        if self.targets is not None:
            d["targets"] = self.targets.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredDataset":
        targets = d.get("targets")
        return cls(np.asarray(d["values"], dtype=float), float(d["epsilon"]), list(d["asset_ids"]),
                   None if targets is None else np.asarray(targets, dtype=float))


@dataclass
class BasisSpec:
    kind: str
    centers: np.ndarray
    scales: np.ndarray

    def to_dict(self) -> dict:
        return {"kind": self.kind, "centers": self.centers.tolist(), "scales": self.scales.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(d["kind"], np.asarray(d["centers"], dtype=float), np.asarray(d["scales"], dtype=float))


@dataclass
class EnsembleFit:
    raw_w: np.ndarray
    portfolio_weights: np.ndarray
    lambda_s: float
    basis: BasisSpec
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "raw_w": self.raw_w.tolist(),
            "portfolio_weights": self.portfolio_weights.tolist(),
            "lambda_s": float(self.lambda_s),
            "basis": self.basis.to_dict(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleFit":
        return cls(np.asarray(d["raw_w"], dtype=float), np.asarray(d["portfolio_weights"], dtype=float),
                   float(d["lambda_s"]), BasisSpec.from_dict(d["basis"]), dict(d.get("diagnostics", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def delta_weights(losses, epsilon) -> np.ndarray:
    """Per-member update factors for one instance.

    The lowest-loss member (first index on ties) gets ``1 - epsilon``, the
    others ``epsilon / (M - 1)``. Arithmetic happens in the type of
    ``epsilon``, so a ``fractions.Fraction`` gives exact values.
    """
    losses = np.asarray(losses, dtype=float)
    m = losses.size
    if m == 1:
        return np.ones(1)
    winner = int(np.argmin(losses))
    best = 1 - epsilon
    rest = epsilon / (m - 1)
    return np.array([float(best) if j == winner else float(rest) for j in range(m)])


def _delta_fn(epsilon: float, m: int):
    if m == 1:
        one = np.ones(1)
        return lambda losses: one
    best, rest = 1.0 - epsilon, epsilon / (m - 1)

    def fn(losses):
        d = np.full(m, rest)
        d[np.argmin(losses)] = best
        return d

    return fn


def form_structured_dataset(train: ReturnsMatrix, cfg: PredictorConfig, epsilon: float,
                            init=None, delta_log=None, role: int = 1):
    """Jointly train one predictor per column and record their predictions.

    ``init`` optionally supplies the starting PredictorParams (one per
    column); otherwise they are drawn from ``cfg.seed`` with one stream per
    column. Returns (StructuredDataset, trained params).
    """
    cfg.validate()
    if not 0.0 <= epsilon <= 1.0:
        raise InvalidParameter("epsilon must lie in [0, 1]")
    m = train.n_assets
    if m < 1:
        raise InvalidParameter("need at least one asset column")
    inputs, targets = lagged_instances(train.values, cfg.lag_window, cfg.tau)
    if init is None:
        stack = PredictorStack.init(cfg, [(role, j) for j in range(m)])
    else:
        if len(init) != m:
            raise ShapeMismatch(f"{len(init)} initial predictors for {m} columns")
        stack = PredictorStack.from_params(init)
    preds = sgd_pass(stack, inputs, targets, cfg, _delta_fn(epsilon, m), delta_log)
    start = cfg.lag_window - 1 + cfg.tau
    stamps = train.timestamps[start:start + targets.shape[0]]
    ds = StructuredDataset(preds, float(epsilon), list(train.asset_ids), targets, stamps)
    return ds, stack.unstack()


def basis_transform(ds, kind: str = "radial", floor: bool = True):
    """Column-wise basis map of the structured dataset.

    Centres and scales are the column mean and population std. ``gaussian``
    gives exp(-(x - mu)^2 / (2 sigma^2)); ``radial`` gives |x - mu| / sigma.
    """
    if kind not in BASIS_KINDS:
        raise InvalidParameter(f"unknown basis kind {kind!r}; expected one of {BASIS_KINDS}")
    x = np.asarray(ds.values if isinstance(ds, StructuredDataset) else ds, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidParameter("basis transform needs an n x M matrix with n >= 2")
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    if floor:
        sigma = np.maximum(sigma, SIGMA_FLOOR * (1.0 + np.abs(mu)))
    elif np.any(sigma <= 0):
        raise DegenerateColumn(f"constant prediction column(s): {np.flatnonzero(sigma <= 0).tolist()}")
    z = (x - mu) / sigma
    phi = np.exp(-0.5 * z * z) if kind == "gaussian" else np.abs(z)
    return phi, BasisSpec(kind, mu, sigma)


def equal_weight_target(r) -> np.ndarray:
    values = r.values if isinstance(r, ReturnsMatrix) else np.asarray(r, dtype=float)
    if values.ndim != 2 or values.shape[1] < 1:
        raise InvalidParameter("target needs an N x M matrix with M >= 1")
    return values.mean(axis=1)


def fit_srbfn(phi, target, lambda_s: float) -> np.ndarray:
    """Ridge coefficients w = (Phi^T Phi + lambda_s I)^-1 Phi^T target.

    Cholesky on the regularised normal equations when lambda_s > 0, a QR
    solve of the plain least-squares problem otherwise.
    """
    phi = np.asarray(phi, dtype=float)
    target = np.asarray(target, dtype=float)
    if phi.ndim != 2 or target.shape != (phi.shape[0],):
        raise ShapeMismatch(f"design {phi.shape} vs target {target.shape}")
    if lambda_s < 0:
        raise InvalidParameter("lambda_s must be >= 0")
    n, m = phi.shape
    if lambda_s > 0:
        a = phi.T @ phi
        a[np.diag_indices_from(a)] += lambda_s
        try:
            return linalg.cho_solve(linalg.cho_factor(a), phi.T @ target)
        except linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from exc
    if n < m:
        raise SingularSystem(f"{n} rows cannot determine {m} unregularised weights")
    q, r = np.linalg.qr(phi)
    diag = np.abs(np.diag(r))
    if diag.min() <= max(n, m) * np.finfo(float).eps * max(diag.max(), 1.0):
        raise SingularSystem("design matrix is rank deficient; use lambda_s > 0")
    return linalg.solve_triangular(r, q.T @ target)


def extract_portfolio_weights(raw_w) -> np.ndarray:
    w = np.clip(np.asarray(raw_w, dtype=float), 0.0, None)
    total = w.sum()
    if total <= 0:
        return np.full(w.size, 1.0 / w.size)
    return w / total


def predict_portfolio(phi, raw_w) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    raw_w = np.asarray(raw_w, dtype=float)
    if phi.ndim != 2 or raw_w.shape != (phi.shape[1],):
        raise ShapeMismatch(f"design {phi.shape} vs weights {raw_w.shape}")
    # row-wise sums rather than BLAS gemv, which may fuse multiply-adds
    return (phi * raw_w).sum(axis=1)


def fit_ensemble(ds: StructuredDataset, target, lambda_s: float, kind: str = "radial") -> EnsembleFit:
    """Basis transform, ridge fit and weight extraction in one call."""
    phi, spec = basis_transform(ds, kind)
    raw_w = fit_srbfn(phi, target, lambda_s)
    resid = np.asarray(target) - phi @ raw_w
    return EnsembleFit(raw_w, extract_portfolio_weights(raw_w), lambda_s, spec,
                       {"train_rmse": float(np.sqrt(np.mean(resid ** 2)))})


def design_matrix_frame(phi, asset_ids, timestamps=None) -> pd.DataFrame:
    """Design matrix as a DataFrame, for CSV audit export."""
    index = None if timestamps is None else pd.DatetimeIndex(timestamps, name="date")
    return pd.DataFrame(np.asarray(phi), index=index, columns=list(asset_ids))
