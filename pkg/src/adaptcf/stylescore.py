"""Entropy-weight driving-style scores and percentile clustering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .trajdata import FEATURE_NAMES

BENEFIT, COST = "benefit", "cost"
# speed/acceleration statistics grow with aggressiveness, headways shrink
DEFAULT_ORIENTATION = (BENEFIT, BENEFIT, BENEFIT, BENEFIT, COST, COST)
CONSERVATIVE, NORMAL, AGGRESSIVE = 0, 1, 2
CLUSTER_NAMES = {CONSERVATIVE: "conservative", NORMAL: "normal", AGGRESSIVE: "aggressive"}
N_ATTRIBUTES = len(FEATURE_NAMES)


@dataclass
class EvaluationMatrix:
    values: np.ndarray
    vehicle_ids: list[int]
    orientation: tuple[str, ...] = DEFAULT_ORIENTATION

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.vehicle_ids = [int(v) for v in self.vehicle_ids]
        self.orientation = tuple(self.orientation)
        if self.values.ndim != 2 or self.values.shape[1] != N_ATTRIBUTES:
            raise ConfigError(f"evaluation matrix must have {N_ATTRIBUTES} columns")
        if self.values.shape[0] < 2:
            raise ConfigError("evaluation matrix needs at least 2 rows")
        if len(self.vehicle_ids) != self.values.shape[0]:
            raise ConfigError("one vehicle id per row required")
        if len(self.orientation) != N_ATTRIBUTES or any(o not in (BENEFIT, COST) for o in self.orientation):
            raise ConfigError("orientation needs one 'benefit' or 'cost' tag per column")
        bad = np.argwhere(~np.isfinite(self.values))
        if len(bad):
            i, j = bad[0]
            raise DataError(f"non-finite value at row {i} (vehicle {self.vehicle_ids[i]}), "
                            f"column {j} ({FEATURE_NAMES[j]})")


@dataclass
class NormalizedMatrix:
    values: np.ndarray
    degenerate: np.ndarray  # bool per column: constant input, no information


@dataclass
class WeightVector:
    w: np.ndarray
    entropy: np.ndarray = field(repr=False, default=None)


@dataclass
class StyleScore:
    vehicle_id: int
    score: float
    cluster: int | None = None


def normalize_matrix(E: EvaluationMatrix) -> NormalizedMatrix:
    """Min-max scale each column into [0, 1], flipping cost columns."""
    X = E.values
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = hi - lo
    degenerate = span == 0
    safe = np.where(degenerate, 1.0, span)
    benefit = np.array([o == BENEFIT for o in E.orientation])
    out = np.where(benefit, (X - lo) / safe, (hi - X) / safe)
    out[:, degenerate] = 0.5
    return NormalizedMatrix(out, degenerate)


def entropy_weights(E_nor: NormalizedMatrix | np.ndarray) -> WeightVector:
    """Entropy weights; columns with lower entropy (more dispersion) weigh more."""
    X = np.asarray(E_nor.values if isinstance(E_nor, NormalizedMatrix) else E_nor, dtype=float)
    m, n = X.shape
    if m < 2:
        raise ConfigError("entropy weights need at least 2 rows")
    col_sum = X.sum(axis=0)
    ent = np.ones(n)
    live = col_sum > 0
    P = X[:, live] / col_sum[live]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(P > 0, P * np.log(P), 0.0)
    ent[live] = -plogp.sum(axis=0) / math.log(m)
    ent = np.clip(ent, 0.0, 1.0)
    denom = n - ent.sum()
    if denom <= 1e-12:
        return WeightVector(np.full(n, 1.0 / n), ent)
    return WeightVector((1.0 - ent) / denom, ent)


def style_scores(E_nor: NormalizedMatrix | np.ndarray, W: WeightVector | np.ndarray,
                 vehicle_ids: Sequence[int] | None = None) -> list[StyleScore]:
    X = np.asarray(E_nor.values if isinstance(E_nor, NormalizedMatrix) else E_nor, dtype=float)
    w = np.asarray(W.w if isinstance(W, WeightVector) else W, dtype=float)
    if X.shape[1] != len(w):
        raise ConfigError(f"matrix has {X.shape[1]} columns but {len(w)} weights")
    s = X @ w
    ids = range(len(s)) if vehicle_ids is None else vehicle_ids
    return [StyleScore(int(v), float(x)) for v, x in zip(ids, s)]


def percentile_cut(values, q: float) -> float:
    """Linearly interpolated percentile between order statistics (numpy's default rule)."""
    return float(np.percentile(np.asarray(values, dtype=float), q))


def cluster_by_percentile(scores: Sequence[StyleScore], cuts=(25.0, 75.0)) -> tuple[list[StyleScore], tuple[float, float]]:
    """Label scores strictly below the low cut 0, strictly above the high cut 2, others 1."""
    if len(scores) < 4:
        raise ConfigError("percentile clustering needs at least 4 scores")
    lo_q, hi_q = cuts
    if not 0 <= lo_q <= hi_q <= 100:
        raise ConfigError("cuts must satisfy 0 <= low <= high <= 100")
    s = np.array([x.score for x in scores])
    lo, hi = percentile_cut(s, lo_q), percentile_cut(s, hi_q)
    out = []
    for x in scores:
        label = CONSERVATIVE if x.score < lo else AGGRESSIVE if x.score > hi else NORMAL
        out.append(StyleScore(x.vehicle_id, x.score, label))
    return out, (lo, hi)


@dataclass
class ScoreReport:
    matrix: EvaluationMatrix
    normalized: NormalizedMatrix
    weights: WeightVector
    scores: list[StyleScore]
    cut_values: tuple[float, float]

    def cluster_sizes(self) -> tuple[int, int, int]:
        labels = [s.cluster for s in self.scores]
        return tuple(labels.count(k) for k in (CONSERVATIVE, NORMAL, AGGRESSIVE))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"vehicle_id": self.matrix.vehicle_ids})
        for j, name in enumerate(FEATURE_NAMES):
            df[name] = self.matrix.values[:, j]
        for j, name in enumerate(FEATURE_NAMES):
            df[f"{name}_nor"] = self.normalized.values[:, j]
        df["score"] = [s.score for s in self.scores]
        df["cluster"] = [s.cluster for s in self.scores]
        return df

    def write(self, csv_path: str | Path, sidecar_path: str | Path) -> None:
        self.to_frame().to_csv(csv_path, index=False, float_format="%.17g", lineterminator="\n")
        self.write_sidecar(sidecar_path)

    def write_sidecar(self, path: str | Path) -> None:
        """Weights, entropies and cut values as JSON (cuts rounded to 3 decimals)."""
        meta = {
            "attributes": list(FEATURE_NAMES),
            "orientation": list(self.matrix.orientation),
            "weights": [float(x) for x in self.weights.w],
            "entropy": [float(x) for x in self.weights.entropy],
            "degenerate_columns": [FEATURE_NAMES[j] for j in np.flatnonzero(self.normalized.degenerate)],
            "cut_values": [round(c, 3) for c in self.cut_values],
            "cut_values_exact": list(self.cut_values),
            "cluster_sizes": list(self.cluster_sizes()),
        }
        Path(path).write_text(json.dumps(meta, indent=2) + "\n")


def score_vehicles(features: np.ndarray, vehicle_ids: Sequence[int],
                   orientation=DEFAULT_ORIENTATION, cuts=(25.0, 75.0)) -> ScoreReport:
    """Full pipeline: matrix, normalisation, weights, scores, clusters."""
    E = EvaluationMatrix(features, list(vehicle_ids), orientation)
    nor = normalize_matrix(E)
    W = entropy_weights(nor)
    scores, cut_values = cluster_by_percentile(style_scores(nor, W, E.vehicle_ids), cuts)
    return ScoreReport(E, nor, W, scores, cut_values)
