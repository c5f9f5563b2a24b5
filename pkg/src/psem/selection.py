"""Forecast ranking and diversity-controlled constituent selection."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import InsufficientCandidates, InvalidParameter

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForecastRanking:
    entries: list[tuple[str, float]]  # descending by forecast
    index: int | None = None  # row of the decision point, if known

    @property
    def asset_ids(self) -> list[str]:
        return [a for a, _ in self.entries]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["asset_id", "forecast"])
            for a, v in self.entries:
                w.writerow([a, repr(float(v))])


@dataclass(frozen=True)
class SelectionConfig:
    M: int
    threshold_T: float = 0.0
    gamma: float = 1.0
    seed: int = 0

    def validate(self) -> "SelectionConfig":
        if self.M < 1:
            raise InvalidParameter("M must be >= 1")
        if self.gamma < 1:
            raise InvalidParameter("gamma must be >= 1")
        return self


def rank_assets(forecasts: Mapping[str, float], index: int | None = None) -> ForecastRanking:
    if not forecasts:
        raise InvalidParameter("no forecasts to rank")
    for a, v in forecasts.items():
        if not np.isfinite(v):
            raise InvalidParameter(f"non-finite forecast for {a}")
    entries = sorted(((str(a), float(v)) for a, v in forecasts.items()), key=lambda e: (-e[1], e[0]))
    return ForecastRanking(entries, index)


def select_assets(rank: ForecastRanking, cfg: SelectionConfig) -> list[str]:
    """Sample M constituents uniformly from the top gamma*M assets above T.

    Only forecasts strictly above ``threshold_T`` are eligible. If fewer than
    gamma*M (but at least M) qualify the pool shrinks with a warning. The
    result keeps ranking order; gamma = 1 is the deterministic top-M.
    """
    cfg.validate()
    eligible = [a for a, v in rank.entries if v > cfg.threshold_T]
    if len(eligible) < cfg.M:
        raise InsufficientCandidates(
            f"only {len(eligible)} asset(s) above T={cfg.threshold_T}, need M={cfg.M}"
        )
    pool_size = int(np.floor(cfg.gamma * cfg.M + 1e-9))
    if len(eligible) < pool_size:
        msg = f"candidate pool shrinks from {pool_size} to {len(eligible)} (threshold T={cfg.threshold_T})"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        log.debug(msg)
        pool_size = len(eligible)
    pool = eligible[:pool_size]
    if pool_size == cfg.M:
        return pool
    rng = np.random.default_rng(cfg.seed)
    picked = np.sort(rng.choice(pool_size, size=cfg.M, replace=False))
    return [pool[i] for i in picked]
