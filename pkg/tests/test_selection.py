import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psem.errors import InsufficientCandidates, InvalidParameter
from psem.selection import SelectionConfig, rank_assets, select_assets

RANK4 = rank_assets({"a": 0.04, "b": 0.03, "c": 0.02, "d": 0.01})


def test_rank_examples():
    assert rank_assets({"a": 0.02, "b": 0.05}).asset_ids == ["b", "a"]
    assert rank_assets({"b": 0.02, "a": 0.02}).asset_ids == ["a", "b"]
    assert rank_assets({"x": -0.1}).entries == [("x", -0.1)]
    with pytest.raises(InvalidParameter):
        rank_assets({})
    with pytest.raises(InvalidParameter):
        rank_assets({"a": float("nan")})


def test_select_top_m():
    assert select_assets(RANK4, SelectionConfig(M=2, gamma=1)) == ["a", "b"]


def test_select_pool_shrinks():
    rank = rank_assets({"a": 0.04, "b": 0.03, "c": 0.02, "d": -0.01})
    with pytest.warns(RuntimeWarning, match="shrinks"):
        out = select_assets(rank, SelectionConfig(M=2, gamma=2, seed=3))
    assert len(out) == 2 and set(out) <= {"a", "b", "c"}


def test_select_seeded_draw():
    cfg = SelectionConfig(M=2, gamma=2, seed=11)
    out = select_assets(RANK4, cfg)
    # oracle: the draw is default_rng(seed).choice over pool positions, kept in rank order
    idx = sorted(np.random.default_rng(11).choice(4, size=2, replace=False))
    assert out == [RANK4.asset_ids[i] for i in idx]
    assert select_assets(RANK4, cfg) == out


def test_threshold_is_strict():
    rank = rank_assets({"a": 0.01, "b": 0.0})
    assert select_assets(rank, SelectionConfig(M=1, threshold_T=0.0)) == ["a"]
    with pytest.raises(InsufficientCandidates):
        select_assets(rank, SelectionConfig(M=2, threshold_T=0.0))


def test_invalid_config():
    with pytest.raises(InvalidParameter):
        select_assets(RANK4, SelectionConfig(M=0))
    with pytest.raises(InvalidParameter):
        select_assets(RANK4, SelectionConfig(M=1, gamma=0.5))


def test_selection_frequency_uniform():
    counts = Counter()
    for seed in range(10_000):
        counts.update(select_assets(RANK4, SelectionConfig(M=2, gamma=2, seed=seed)))
    for a in "abcd":
        assert abs(counts[a] / 10_000 - 0.5) <= 0.02


def test_ranking_csv(tmp_path):
    path = tmp_path / "rank.csv"
    RANK4.to_csv(path)
    assert path.read_text().splitlines()[:2] == ["asset_id,forecast", "a,0.04"]


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.text("abcdefgh", min_size=1, max_size=3), st.floats(-0.1, 0.1), min_size=1, max_size=15),
       st.integers(1, 5), st.sampled_from([1, 1.5, 2, 3, 5]), st.floats(-0.05, 0.05), st.integers(0, 1000))
def test_selection_properties(forecasts, m, gamma, t, seed):
    rank = rank_assets(forecasts)
    vals = [v for _, v in rank.entries]
    assert vals == sorted(vals, reverse=True)
    cfg = SelectionConfig(M=m, threshold_T=t, gamma=gamma, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            out = select_assets(rank, cfg)
        except InsufficientCandidates:
            assert sum(v > t for v in vals) < m
            return
    assert len(out) == m == len(set(out))
    assert all(forecasts[a] > t for a in out)
    positions = [rank.asset_ids.index(a) for a in out]
    assert positions == sorted(positions)
    if gamma == 1:
        assert out == rank.asset_ids[:m]
