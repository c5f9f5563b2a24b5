"""Portfolio performance ratios and the bias-variance-diversity diagnostic.

Standard deviations are population (ddof=0) everywhere and the risk-free
rate is zero. Ratios whose denominator vanishes because there is no
downside return ``inf`` instead of raising, so that grid reports survive
lucky windows.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidParameter, ShapeMismatch, ZeroVolatility

MONTHS_PER_YEAR = 12


@dataclass
class MetricReport:
    modified_sharpe: float
    annualized_sharpe: float
    sortino: float
    omega: float
    max_drawdown: float
    period: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class BvdReport:
    avg_bias: float
    avg_variance: float
    diversity: float
    ensemble_expected_loss: float

    @property
    def identity_gap(self) -> float:
        """Relative mismatch of bias + variance - diversity against the loss."""
        lhs = self.avg_bias + self.avg_variance - self.diversity
        return abs(lhs - self.ensemble_expected_loss) / max(abs(self.ensemble_expected_loss), 1e-300)


def _vector(x, min_len=1) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size < min_len:
        raise InvalidParameter(f"need at least {min_len} observation(s), got {x.size}")
    return x


def _pstd(x: np.ndarray) -> float:
    s = float(np.std(x))
    if s == 0.0 or np.all(x == x[0]):
        raise ZeroVolatility("series has zero volatility")
    return s


def cumulative_return(daily) -> float:
    return float(np.prod(1.0 + _vector(daily)) - 1.0)


def modified_sharpe(daily) -> float:
    """Cumulative period return over the std of the daily returns."""
    r = _vector(daily, 2)
    return cumulative_return(r) / _pstd(r)


def annualized_sharpe(monthly) -> float:
    r = _vector(monthly, 2)
    return float(r.mean()) / _pstd(r) * math.sqrt(MONTHS_PER_YEAR)


def sortino(returns, target: float = 0.0) -> float:
    r = _vector(returns)
    downside = np.minimum(r - target, 0.0)
    dd = math.sqrt(float(np.mean(downside * downside)))
    if dd == 0.0:
        return math.inf
    return (float(r.mean()) - target) / dd


def omega(returns, threshold: float = 0.0) -> float:
    r = _vector(returns)
    gains = float(np.sum(np.maximum(r - threshold, 0.0)))
    losses = float(np.sum(np.maximum(threshold - r, 0.0)))
    if losses == 0.0:
        return math.inf
    return gains / losses


def max_drawdown(returns) -> float:
    """Worst peak-to-trough loss of the compounded path that starts at 1."""
    r = _vector(returns)
    value = np.concatenate([[1.0], np.cumprod(1.0 + r)])
    peak = np.maximum.accumulate(value)
    return float(min(0.0, np.min(value / peak - 1.0)))


def monthly_returns(daily, days_per_month: int = 21) -> np.ndarray:
    r = _vector(daily)
    if r.size % days_per_month:
        raise InvalidParameter(f"{r.size} days is not a whole number of {days_per_month}-day months")
    return np.prod(1.0 + r.reshape(-1, days_per_month), axis=1) - 1.0


def _nan_on_zero_vol(fn, x) -> float:
    try:
        return fn(x)
    except (ZeroVolatility, InvalidParameter):
        return math.nan


def metric_report(daily, days_per_month: int = 21, period: str = "") -> MetricReport:
    """All ratios for one daily return path.

    The annualised Sharpe uses the month-by-month compounded returns and is
    nan when the path covers fewer than two months; a zero-volatility path
    gives a nan modified Sharpe.
    """
    r = _vector(daily)
    ann = math.nan
    if r.size % days_per_month == 0 and r.size // days_per_month >= 2:
        ann = _nan_on_zero_vol(annualized_sharpe, monthly_returns(r, days_per_month))
    return MetricReport(
        modified_sharpe=_nan_on_zero_vol(modified_sharpe, r),
        annualized_sharpe=ann,
        sortino=sortino(r),
        omega=omega(r),
        max_drawdown=max_drawdown(r),
        period=period,
    )


def bvd_decomposition(member_preds, targets) -> BvdReport:
    """Squared-loss decomposition of an ensemble's expected loss.

    ``member_preds`` is K x M x N (K resample draws of M members over N
    targets) or M x N for a single draw. Expectations over draws are plain
    means; the combiner is the member average.
    """
    f = np.asarray(member_preds, dtype=float)
    if f.ndim == 2:
        f = f[None]
    y = np.asarray(targets, dtype=float)
    if f.ndim != 3 or y.shape != (f.shape[2],):
        raise ShapeMismatch(f"predictions {np.shape(member_preds)} vs targets {y.shape}")
    centroid = f.mean(axis=0)  # M x N
    combined = f.mean(axis=1, keepdims=True)  # K x 1 x N
    avg_bias = float(np.mean((centroid - y) ** 2))
    avg_variance = float(np.mean((f - centroid) ** 2))
    diversity = float(np.mean((f - combined) ** 2))
    loss = float(np.mean((combined[:, 0, :] - y) ** 2))
    return BvdReport(avg_bias, avg_variance, diversity, loss)
