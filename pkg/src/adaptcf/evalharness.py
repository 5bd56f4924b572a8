"""RMSE metrics, the per-pair and per-cluster evaluation protocols, and report tables."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .bayesopt import BoConfig
from .calib import fixed_calibration, label_windows, n_train_windows, LabelDataset, TRAIN
from .carfollow import ModelKind, ParamSchedule, SimContext, get_model, simulate_follower
from .errors import ConfigError, DataError
from .grunet import GruModel, TrainConfig, build_samples, predict_schedule, train
from .trajdata import VehiclePair, slice_windows

logger = logging.getLogger(__name__)


def rmse(sim_velocities, real_velocities) -> float:
    a = np.asarray(sim_velocities, dtype=float)
    b = np.asarray(real_velocities, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DataError("rmse of empty sequences")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def rmse_improvement(fixed_a: float, proposed_b: float) -> float:
    """(a - b) / a, or NaN when a is zero."""
    if fixed_a == 0:
        return math.nan
    return (fixed_a - proposed_b) / fixed_a


def trim(values, fraction: float = 0.10) -> np.ndarray:
    """Sorted values with floor(fraction * n) dropped from each end."""
    v = np.sort(np.asarray(values, dtype=float))
    k = int(math.floor(fraction * len(v)))
    return v[k:len(v) - k] if k else v


@dataclass
class EvalConfig:
    window_len: int = 5
    stride: int | None = None
    train_fraction: float = 0.8
    bo: BoConfig | None = None
    training: TrainConfig = field(default_factory=TrainConfig)
    hidden_dim: int = 32
    ctx: SimContext = field(default_factory=SimContext)
    seed: int = 0
    n_folds: int = 5
    trim: float = 0.10
    workers: int = 1

    @property
    def step(self) -> int:
        return self.window_len if self.stride is None else self.stride


@dataclass
class EvalReport:
    pair_id: tuple[int, int]
    rmse_default: float
    rmse_fixed: float
    rmse_proposed: float
    improvement: float
    test_start: int
    test_stop: int  # exclusive
    fixed_params: np.ndarray = field(repr=False, default=None)
    traces: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def row(self) -> dict:
        return {"leader_id": self.pair_id[0], "follower_id": self.pair_id[1],
                "rmse_default": self.rmse_default, "rmse_fixed": self.rmse_fixed,
                "rmse_proposed": self.rmse_proposed, "improvement": self.improvement,
                "test_start": self.test_start, "test_stop": self.test_stop}


def split_frame(pair: VehiclePair, window_len: int, stride: int | None, train_fraction: float) -> tuple[int, int, int]:
    """(first test frame, end of test segment, number of training windows)."""
    windows = slice_windows(pair, window_len, stride)
    if len(windows) < 5:
        raise DataError(f"pair {pair.pair_id} has {len(windows)} windows; evaluation needs 5")
    n_train = n_train_windows(len(windows), train_fraction)
    if not 1 <= n_train < len(windows):
        raise ConfigError(f"train_fraction {train_fraction} leaves no train or test windows")
    last = windows[-1]
    return windows[n_train].start_frame, last.start_frame + last.length, n_train


def evaluate_with(pair: VehiclePair, model_kind: str | ModelKind, fixed_params, model: GruModel,
                  config: EvalConfig, keep_traces: bool = False) -> EvalReport:
    """Score default, fixed and GRU-scheduled parameters on the pair's test windows.

    All three runs replay the same leader over the same frames and start
    from the follower's recorded state at the first test frame.
    """
    kind = get_model(model_kind) if isinstance(model_kind, str) else model_kind
    start, stop, _ = split_frame(pair, config.window_len, config.stride, config.train_fraction)
    test = pair.between(start, stop)
    x0, v0 = float(test.follower.position[0]), float(test.follower.velocity[0])
    schedule = predict_schedule(model, pair, config.window_len, config.stride,
                                defaults=kind.defaults).restricted(start, stop)
    runs = {
        "default": np.asarray(kind.defaults, float),
        "fixed": np.asarray(fixed_params, float),
        "proposed": schedule,
    }
    sims = {name: simulate_follower(kind, p, test.leader, x0, v0, config.ctx) for name, p in runs.items()}
    real = test.follower.velocity
    scores = {name: rmse(sim.velocity, real) for name, sim in sims.items()}
    traces = {}
    if keep_traces:
        traces = {"frame": test.follower.frames, "real": real,
                  **{name: sim.velocity for name, sim in sims.items()}}
    return EvalReport(pair.pair_id, scores["default"], scores["fixed"], scores["proposed"],
                      rmse_improvement(scores["fixed"], scores["proposed"]), start, stop,
                      np.asarray(fixed_params, float), traces)


def fixed_for_pair(pair: VehiclePair, model_kind, config: EvalConfig) -> np.ndarray:
    """Fixed calibration over exactly the frames preceding the test windows."""
    start, _, _ = split_frame(pair, config.window_len, config.stride, config.train_fraction)
    return fixed_calibration(pair, model_kind, config.bo, ctx=config.ctx,
                             n_frames=start - pair.overlap[0])


def train_gru(pairs: Sequence[VehiclePair], labels: LabelDataset, config: EvalConfig,
              seed: int | None = None, kind: ModelKind | None = None) -> GruModel:
    """GRU fitted to the training-split labels of ``pairs``."""
    samples = build_samples(pairs, labels.subset(TRAIN, [p.pair_id for p in pairs]))
    kind = get_model(labels.model_kind) if kind is None else kind
    model = GruModel.init(samples.inputs.shape[2], config.hidden_dim, kind.n_params,
                          seed=config.seed if seed is None else seed, model_kind=kind.name,
                          bounds=kind.bounds)
    tc = config.training if seed is None else _with_seed(config.training, seed)
    return train(model, samples, tc).model


def _with_seed(tc: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**tc.__dict__, "seed": seed})


def evaluate_pair(pair: VehiclePair, model_kind: str | ModelKind, config: EvalConfig = EvalConfig(),
                  labels: LabelDataset | None = None, keep_traces: bool = False) -> EvalReport:
    """Label, train, calibrate and score one pair on its last windows."""
    kind = get_model(model_kind) if isinstance(model_kind, str) else model_kind
    split_frame(pair, config.window_len, config.stride, config.train_fraction)
    if labels is None:
        labels = label_windows([pair], kind, config.window_len, config.stride, config.bo,
                               config.ctx, config.train_fraction)
    model = train_gru([pair], labels, config, kind=kind)
    fixed = fixed_for_pair(pair, kind, config)
    return evaluate_with(pair, kind, fixed, model, config, keep_traces)


def fold_partition(n: int, n_folds: int, seed: int, cluster: int = 0) -> list[np.ndarray]:
    """Seeded permutation of range(n) cut into n_folds nearly equal parts."""
    if n < n_folds:
        raise ConfigError(f"cluster {cluster} has {n} vehicles, fewer than {n_folds} folds")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(cluster)]))
    return [np.sort(f) for f in np.array_split(rng.permutation(n), n_folds)]


@dataclass
class FoldResult:
    fold: int
    train_ids: list[tuple[int, int]]
    test_ids: list[tuple[int, int]]
    reports: list[EvalReport]


@dataclass
class ClusterReport:
    cluster: int
    folds: list[FoldResult]
    improvements: np.ndarray
    trimmed: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.trimmed)) if len(self.trimmed) else math.nan

    @property
    def quartiles(self) -> tuple[float, float, float]:
        if not len(self.trimmed):
            return (math.nan,) * 3
        return tuple(float(q) for q in np.percentile(self.trimmed, [25, 50, 75]))

    def summary(self) -> dict:
        q1, med, q3 = self.quartiles
        return {"cluster": self.cluster, "n_vehicles": int(sum(len(f.test_ids) for f in self.folds)),
                "n_trimmed": int(len(self.trimmed)), "mean_improvement": self.mean,
                "q1": q1, "median": med, "q3": q3}


def evaluate_clusters(pairs: Sequence[VehiclePair], clusters: Mapping[tuple[int, int], int],
                      model_kind: str | ModelKind, config: EvalConfig = EvalConfig(),
                      labels: LabelDataset | None = None,
                      trim_fraction: float | None = None,
                      fixed: Mapping[tuple[int, int], np.ndarray] | None = None) -> list[ClusterReport]:
    """Cross-validated evaluation per cluster.

    ``clusters`` maps pair ids to cluster labels. In each fold the GRU is
    trained on the training windows of the other folds' pairs and every
    held-out pair is scored against its own fixed calibration (taken from
    ``fixed`` when given, else computed).
    """
    kind = get_model(model_kind) if isinstance(model_kind, str) else model_kind
    frac = config.trim if trim_fraction is None else trim_fraction
    by_id = {p.pair_id: p for p in pairs}
    members: dict[int, list[tuple[int, int]]] = {}
    for pid, c in clusters.items():
        if pid in by_id:
            members.setdefault(int(c), []).append(tuple(pid))
    for c, ids in members.items():
        if len(ids) < config.n_folds:
            raise ConfigError(f"cluster {c} has {len(ids)} vehicles, fewer than {config.n_folds} folds")
    if labels is None:
        used = [by_id[pid] for ids in members.values() for pid in ids]
        labels = label_windows(used, kind, config.window_len, config.stride, config.bo,
                               config.ctx, config.train_fraction, config.workers)

    reports = []
    for c in sorted(members):
        ids = sorted(members[c])
        folds = fold_partition(len(ids), config.n_folds, config.seed, c)
        fold_results, improvements = [], []
        for k, test_idx in enumerate(folds):
            test_ids = [ids[i] for i in test_idx]
            train_ids = [pid for i, pid in enumerate(ids) if i not in set(test_idx.tolist())]
            seed = int(np.random.SeedSequence([config.seed, c, k]).generate_state(1)[0])
            model = train_gru([by_id[p] for p in train_ids], labels, config, seed=seed, kind=kind)
            fold_reports = []
            for pid in test_ids:
                pair = by_id[pid]
                params = fixed[pid] if fixed is not None and pid in fixed else fixed_for_pair(pair, kind, config)
                rep = evaluate_with(pair, kind, params, model, config)
                fold_reports.append(rep)
                improvements.append(rep.improvement)
            fold_results.append(FoldResult(k, train_ids, test_ids, fold_reports))
        imp = np.array([x for x in improvements if np.isfinite(x)])
        reports.append(ClusterReport(c, fold_results, imp, trim(imp, frac)))
    return reports


def write_pair_reports(reports: Sequence[EvalReport], path: str | Path) -> None:
    pd.DataFrame([r.row() for r in reports]).to_csv(path, index=False, float_format="%.17g",
                                                     lineterminator="\n")


def write_cluster_reports(reports: Sequence[ClusterReport], folds_path: str | Path,
                          summary_path: str | Path) -> None:
    rows = []
    for c in reports:
        for f in c.folds:
            for r in f.reports:
                rows.append({"cluster": c.cluster, "fold": f.fold, "n_train": len(f.train_ids), **r.row()})
    pd.DataFrame(rows).to_csv(folds_path, index=False, float_format="%.17g", lineterminator="\n")
    pd.DataFrame([c.summary() for c in reports]).to_csv(summary_path, index=False, float_format="%.17g",
                                                         lineterminator="\n")


def write_traces(report: EvalReport, path: str | Path) -> None:
    pd.DataFrame(report.traces).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def histogram_table(values, bins: int = 20, value_range=None) -> pd.DataFrame:
    """Plot-ready histogram: bin edges and counts."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    counts, edges = np.histogram(v, bins=bins, range=value_range)
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})
