import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from adaptcf.calib import bo_config_for
from adaptcf.carfollow import KRAUSS
from adaptcf.errors import ConfigError, DataError
from adaptcf.evalharness import (EvalConfig, evaluate_clusters, evaluate_pair, fold_partition, histogram_table,
                                 rmse, rmse_improvement, split_frame, trim, write_cluster_reports)
from adaptcf.grunet import TrainConfig
from adaptcf.synth import planted_constant_pair


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(DataError):
        rmse([1, 2], [1])
    with pytest.raises(DataError):
        rmse([], [])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30).flatmap(lambda n: st.tuples(*[st.lists(st.floats(-50, 50), min_size=n, max_size=n)] * 3)))
def test_rmse_triangle(vs):
    a, b, c = vs
    assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-9
    assert rmse(a, b) == pytest.approx(rmse(b, a))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=50), st.floats(-10, 10))
def test_rmse_constant_offset(v, d):
    assert rmse(np.array(v) + d, v) == pytest.approx(abs(d), abs=1e-9)


def test_improvement():
    assert rmse_improvement(1.033, 0.666) == pytest.approx(0.3553, abs=5e-5)
    assert rmse_improvement(2.0, 2.0) == 0.0
    assert rmse_improvement(1.0, 1.5) == pytest.approx(-0.5)
    assert math.isnan(rmse_improvement(0.0, 0.3))


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 100), st.floats(0, 100))
def test_improvement_at_most_one(a, b):
    assert rmse_improvement(a, b) <= 1.0


def test_trim():
    assert trim(range(10), 0.1).tolist() == list(range(1, 9))
    assert trim([3, 1, 2], 0.1).tolist() == [1, 2, 3]
    assert len(trim(range(19), 0.1)) == 17
    vals = np.random.default_rng(1).normal(size=10)
    kept = trim(vals, 0.1)
    assert vals.max() not in kept and vals.min() not in kept and len(kept) == 8
    assert np.mean(trim(np.full(13, 0.25), 0.1)) == 0.25


def test_fold_partition():
    folds = fold_partition(24, 5, seed=0, cluster=1)
    assert sorted(len(f) for f in folds) == [4, 5, 5, 5, 5]
    assert [len(f) for f in folds] == [5, 5, 5, 5, 4]
    assert sorted(np.concatenate(folds).tolist()) == list(range(24))
    again = fold_partition(24, 5, seed=0, cluster=1)
    assert all(np.array_equal(a, b) for a, b in zip(folds, again))
    other = fold_partition(24, 5, seed=0, cluster=2)
    assert not all(np.array_equal(a, b) for a, b in zip(folds, other))
    with pytest.raises(ConfigError):
        fold_partition(4, 5, 0)


def test_split_frame():
    pair = planted_constant_pair(n_frames=839)
    start, stop, n_train = split_frame(pair, 5, None, 0.8)
    assert n_train == 134 and start == 670 and stop == 835
    with pytest.raises(DataError):
        split_frame(planted_constant_pair(n_frames=20), 5, None, 0.8)


def test_histogram_table():
    t = histogram_table([0.05, 0.15, 0.15, np.nan], bins=10, value_range=(0, 1))
    assert t["count"].tolist()[:2] == [1, 2] and t["count"].sum() == 3


FAST = EvalConfig(training=TrainConfig(epochs=3), hidden_dim=4, bo=bo_config_for(KRAUSS, n_init=4, n_iter=2))


def test_evaluate_pair_shares_frames():
    pair = planted_constant_pair(n_frames=100, seed=2)
    rep = evaluate_pair(pair, "krauss", FAST, keep_traces=True)
    assert (rep.test_start, rep.test_stop) == (80, 100)
    frames = rep.traces["frame"]
    assert frames[0] == 80 and frames[-1] == 99
    for name in ("default", "fixed", "proposed"):
        assert len(rep.traces[name]) == len(frames)
        # every run starts from the recorded follower state
        assert rep.traces[name][0] == rep.traces["real"][0]
    assert rep.rmse_fixed == pytest.approx(rmse(rep.traces["fixed"], rep.traces["real"]))
    assert rep.improvement == pytest.approx(rmse_improvement(rep.rmse_fixed, rep.rmse_proposed))


def test_evaluate_clusters_small(tmp_path):
    pairs = [planted_constant_pair(n_frames=50, seed=s, leader_id=2 * s + 1, follower_id=2 * s + 2)
             for s in range(6)]
    clusters = {p.pair_id: 0 for p in pairs}
    cfg = EvalConfig(training=TrainConfig(epochs=2), hidden_dim=3, n_folds=3,
                     bo=bo_config_for(KRAUSS, n_init=3, n_iter=0))
    reports = evaluate_clusters(pairs, clusters, "krauss", cfg)
    assert len(reports) == 1
    rep = reports[0]
    assert [len(f.test_ids) for f in rep.folds] == [2, 2, 2]
    tested = sorted(pid for f in rep.folds for pid in f.test_ids)
    assert tested == sorted(clusters)
    for f in rep.folds:
        assert not set(f.train_ids) & set(f.test_ids)
    write_cluster_reports(reports, tmp_path / "folds.csv", tmp_path / "summary.csv")
    assert len(pd.read_csv(tmp_path / "folds.csv")) == 6
    assert pd.read_csv(tmp_path / "summary.csv")["n_vehicles"].tolist() == [6]


def test_cluster_too_small():
    pairs = [planted_constant_pair(n_frames=50, seed=s, leader_id=2 * s + 1, follower_id=2 * s + 2)
             for s in range(3)]
    with pytest.raises(ConfigError, match="fewer than 5 folds"):
        evaluate_clusters(pairs, {p.pair_id: 1 for p in pairs}, "krauss", FAST)
