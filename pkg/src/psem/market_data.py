"""Price loading, return computation, windowing and synthetic universes.

Returns are simple (arithmetic) daily returns. One month is 21 trading days
throughout the package.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import EmptyAfterCleaning, InvalidParameter, OutOfRange, ParseError, TooFewRows

log = logging.getLogger(__name__)

DAYS_PER_MONTH = 21


@dataclass(frozen=True)
class CsvLayout:
    """How a price/return CSV is laid out on disk."""

    delimiter: str = ","
    date_format: str | None = None  # None -> ISO-8601


@dataclass
class PriceSeries:
    asset_ids: list[str]
    timestamps: np.ndarray  # datetime64[ns], strictly increasing
    prices: np.ndarray  # N x M, strictly positive
    dropped_rows: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.prices.shape


@dataclass
class ReturnsMatrix:
    asset_ids: list[str]
    timestamps: np.ndarray
    values: np.ndarray  # N x M simple returns, all > -1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidParameter("returns must be a 2-D matrix")
        n, m = self.values.shape
        if len(self.asset_ids) != m or len(self.timestamps) != n:
            raise InvalidParameter(
                f"returns shape {self.values.shape} disagrees with "
                f"{len(self.timestamps)} timestamps / {len(self.asset_ids)} assets"
            )

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_assets(self) -> int:
        return self.values.shape[1]

    def rows(self, start: int, stop: int) -> "ReturnsMatrix":
        return ReturnsMatrix(list(self.asset_ids), self.timestamps[start:stop], self.values[start:stop])

    def columns(self, ids) -> "ReturnsMatrix":
        pos = {a: i for i, a in enumerate(self.asset_ids)}
        idx = [pos[a] for a in ids]
        return ReturnsMatrix(list(ids), self.timestamps, self.values[:, idx])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=pd.DatetimeIndex(self.timestamps, name="date"),
                            columns=list(self.asset_ids))


def load_prices(path, layout: CsvLayout | None = None) -> PriceSeries:
    """Read a wide price CSV (dates in column 0, one column per asset).

    Rows with a blank, zero or negative price in any column are dropped;
    the number of dropped rows is logged and stored on the result.
    """
    layout = layout or CsvLayout()
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    raw = pd.read_csv(path, sep=layout.delimiter, dtype=str, keep_default_na=False)
    if raw.shape[1] < 2:
        raise ParseError(0, 1, "expected a date column and at least one asset column")
    asset_ids = [str(c).strip() for c in raw.columns[1:]]

    dates = []
    for r, text in enumerate(raw.iloc[:, 0]):
        try:
            if layout.date_format is None:
                dates.append(pd.Timestamp(text.strip()))
            else:
                dates.append(pd.to_datetime(text.strip(), format=layout.date_format))
        except (ValueError, TypeError) as exc:
            raise ParseError(r, 0, str(exc)) from None

    n, m = raw.shape[0], len(asset_ids)
    prices = np.empty((n, m))
    for c in range(m):
        for r, cell in enumerate(raw.iloc[:, c + 1]):
            cell = cell.strip()
            if cell == "":
                prices[r, c] = np.nan
                continue
            try:
                prices[r, c] = float(cell)
            except ValueError:
                raise ParseError(r, c + 1, f"not a number: {cell!r}") from None

    keep = np.all(np.isfinite(prices) & (prices > 0), axis=1)
    dropped = int(n - keep.sum())
    if dropped:
        log.info("dropped %d row(s) with missing or non-positive prices", dropped)
    if not keep.any():
        raise EmptyAfterCleaning(f"no valid rows left in {path}")

    stamps = np.array(dates, dtype="datetime64[ns]")[keep]
    if np.any(np.diff(stamps) <= np.timedelta64(0, "ns")):
        bad = int(np.argmax(np.diff(stamps) <= np.timedelta64(0, "ns"))) + 1
        raise ParseError(int(np.flatnonzero(keep)[bad]), 0, "timestamps not strictly increasing")
    return PriceSeries(asset_ids, stamps, prices[keep], dropped)


def compute_returns(p: PriceSeries) -> ReturnsMatrix:
    if p.prices.shape[0] < 2:
        raise TooFewRows("need at least two price rows to form a return")
    values = p.prices[1:] / p.prices[:-1] - 1.0
    return ReturnsMatrix(list(p.asset_ids), p.timestamps[1:], values)


def split_window(r: ReturnsMatrix, train_len: int, test_len: int, offset: int = 0):
    """Contiguous train slice followed immediately by the test slice."""
    if min(train_len, test_len, offset) < 0 or offset + train_len + test_len > r.n_rows:
        raise OutOfRange(
            f"offset {offset} + train {train_len} + test {test_len} exceeds {r.n_rows} rows"
        )
    mid = offset + train_len
    return r.rows(offset, mid), r.rows(mid, mid + test_len)


def synth_universe(
    n_assets: int,
    n_days: int,
    vol_range=(0.01, 0.02),
    corr: float = 0.3,
    drift_range=(0.0, 0.0005),
    seed: int = 0,
) -> ReturnsMatrix:
    """Gaussian one-factor universe: r_tj = mu_j + s_j (sqrt(c) f_t + sqrt(1-c) e_tj).

    Per-asset drift and volatility are drawn uniformly from the given ranges,
    so the expected pairwise correlation is exactly ``corr``.
    """
    if n_assets < 2:
        raise InvalidParameter("n_assets must be >= 2")
    if n_days < 1:
        raise InvalidParameter("n_days must be >= 1")
    lo, hi = vol_range
    if not (0 < lo <= hi):
        raise InvalidParameter("vol_range must be positive and ordered")
    if not (0 <= corr < 1):
        raise InvalidParameter("corr must lie in [0, 1)")
    if drift_range[0] > drift_range[1]:
        raise InvalidParameter("drift_range must be ordered")

    rng = np.random.default_rng(seed)
    vols = rng.uniform(lo, hi, n_assets)
    drifts = rng.uniform(drift_range[0], drift_range[1], n_assets)
    factor = rng.standard_normal(n_days)
    noise = rng.standard_normal((n_days, n_assets))
    z = np.sqrt(corr) * factor[:, None] + np.sqrt(1.0 - corr) * noise
    values = drifts + vols * z
    # keep the > -1 invariant for extreme draws
    values = np.maximum(values, -0.99)

    stamps = pd.bdate_range("2000-01-03", periods=n_days).to_numpy(dtype="datetime64[ns]")
    ids = [f"A{j:03d}" for j in range(n_assets)]
    return ReturnsMatrix(ids, stamps, values, meta={"seed": seed, "corr": corr})


def write_returns_csv(r: ReturnsMatrix, path) -> None:
    frame = r.to_frame()
    frame.index = frame.index.strftime("%Y-%m-%d")
    frame.to_csv(path, float_format="%.17g")


def read_returns_csv(path, layout: CsvLayout | None = None) -> ReturnsMatrix:
    layout = layout or CsvLayout()
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        frame = pd.read_csv(path, sep=layout.delimiter, index_col=0, float_precision="round_trip")
        stamps = pd.to_datetime(frame.index, format=layout.date_format).to_numpy(dtype="datetime64[ns]")
        values = frame.to_numpy(dtype=float)
    except ValueError as exc:
        raise ParseError(-1, -1, str(exc)) from None
    if not np.all(np.isfinite(values)):
        r, c = np.argwhere(~np.isfinite(values))[0]
        raise ParseError(int(r), int(c) + 1, "missing or non-finite return")
    return ReturnsMatrix([str(c) for c in frame.columns], stamps, values)
