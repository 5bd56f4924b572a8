"""Trajectory ingestion, leader-follower pairing, features and windowing.

Trajectories are stored column-wise (one numpy array per field) because an
NGSIM period holds over a million rows; ``Trajectory.samples()`` gives the
row view when one is needed.

Positions are longitudinal (NGSIM ``Local_Y``, front bumper) and all
quantities are SI after parsing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DT = 0.1
FEET_TO_METERS = 0.3048
# time headway denominator floor, m/s
EPS_V = 0.1

FIELDS = ("vehicle_id", "frame", "position", "velocity", "acceleration",
          "leader_id", "vehicle_length")

NGSIM_COLUMNS = {
    "vehicle_id": "Vehicle_ID",
    "frame": "Frame_ID",
    "position": "Local_Y",
    "velocity": "v_Vel",
    "acceleration": "v_Acc",
    "leader_id": "Preceding",
    "vehicle_length": "v_Length",
}
CANONICAL_COLUMNS = {name: name for name in FIELDS}


class TrajectorySample(NamedTuple):
    vehicle_id: int
    frame: int
    position: float
    velocity: float
    acceleration: float
    leader_id: int | None
    vehicle_length: float


@dataclass(eq=False)
class Trajectory:
    """Uniformly sampled kinematics of one vehicle.

    ``leader_id`` uses 0 for "no leader", as NGSIM does.
    """

    vehicle_id: int
    frames: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    leader_id: np.ndarray
    length: np.ndarray
    dt: float = DT

    def __post_init__(self):
        self.vehicle_id = int(self.vehicle_id)
        self.frames = np.asarray(self.frames, dtype=np.int64)
        n = len(self.frames)
        for name in ("position", "velocity", "acceleration", "length"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 0:
                arr = np.full(n, float(arr))
            setattr(self, name, arr)
        lead = np.asarray(self.leader_id, dtype=np.int64)
        self.leader_id = np.full(n, int(lead)) if lead.ndim == 0 else lead
        if n == 0:
            raise DataError(f"vehicle {self.vehicle_id}: empty trajectory")
        for name in ("position", "velocity", "acceleration", "leader_id", "length"):
            if len(getattr(self, name)) != n:
                raise DataError(f"vehicle {self.vehicle_id}: field {name} has wrong length")
        steps = np.diff(self.frames)
        if np.any(steps != 1):
            k = int(np.flatnonzero(steps != 1)[0])
            raise DataError(
                f"vehicle {self.vehicle_id}: frame gap {int(steps[k])} "
                f"between frames {int(self.frames[k])} and {int(self.frames[k + 1])}")
        if np.any(self.velocity < 0):
            raise DataError(f"vehicle {self.vehicle_id}: negative velocity")
        if np.any(self.length <= 0):
            raise DataError(f"vehicle {self.vehicle_id}: non-positive vehicle length")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def start_frame(self) -> int:
        return int(self.frames[0])

    @property
    def end_frame(self) -> int:
        """Last frame, inclusive."""
        return int(self.frames[-1])

    def sample(self, i: int) -> TrajectorySample:
        lead = int(self.leader_id[i])
        return TrajectorySample(self.vehicle_id, int(self.frames[i]), float(self.position[i]),
                                float(self.velocity[i]), float(self.acceleration[i]),
                                lead if lead != 0 else None, float(self.length[i]))

    def samples(self) -> Iterator[TrajectorySample]:
        for i in range(len(self)):
            yield self.sample(i)

    def between(self, start: int, stop: int) -> "Trajectory":
        """Sub-trajectory covering frames ``[start, stop)``."""
        if start < self.start_frame or stop > self.end_frame + 1 or stop <= start:
            raise DataError(
                f"vehicle {self.vehicle_id}: frames [{start}, {stop}) outside "
                f"[{self.start_frame}, {self.end_frame}]")
        i, j = start - self.start_frame, stop - self.start_frame
        return Trajectory(self.vehicle_id, self.frames[i:j], self.position[i:j],
                          self.velocity[i:j], self.acceleration[i:j], self.leader_id[i:j],
                          self.length[i:j], self.dt)

    def shifted(self, offset: int) -> "Trajectory":
        return Trajectory(self.vehicle_id, self.frames + offset, self.position, self.velocity,
                          self.acceleration, self.leader_id, self.length, self.dt)

    @classmethod
    def from_samples(cls, samples: Sequence[TrajectorySample], dt: float = DT) -> "Trajectory":
        if not samples:
            raise DataError("no samples")
        return cls(samples[0].vehicle_id,
                   [s.frame for s in samples],
                   [s.position for s in samples],
                   [s.velocity for s in samples],
                   [s.acceleration for s in samples],
                   [s.leader_id or 0 for s in samples],
                   [s.vehicle_length for s in samples], dt)


@dataclass(eq=False)
class VehiclePair:
    leader: Trajectory
    follower: Trajectory
    # inclusive frame range
    overlap: tuple[int, int] = field(init=False)

    def __post_init__(self):
        if (self.leader.start_frame != self.follower.start_frame
                or self.leader.end_frame != self.follower.end_frame):
            raise DataError("leader and follower must cover the same frames")
        self.overlap = (self.follower.start_frame, self.follower.end_frame)

    @property
    def pair_id(self) -> tuple[int, int]:
        return (self.leader.vehicle_id, self.follower.vehicle_id)

    @property
    def n_frames(self) -> int:
        return len(self.follower)

    @property
    def spacing(self) -> np.ndarray:
        """Front-to-front distance, m."""
        return self.leader.position - self.follower.position

    def between(self, start: int, stop: int) -> "VehiclePair":
        return VehiclePair(self.leader.between(start, stop), self.follower.between(start, stop))


@dataclass(frozen=True)
class FeatureVector:
    vel_mean: float
    vel_var: float
    acc_mean: float
    acc_var: float
    h_s: float
    h_t: float

    def as_array(self) -> np.ndarray:
        return np.array([self.vel_mean, self.vel_var, self.acc_mean, self.acc_var,
                         self.h_s, self.h_t])


FEATURE_NAMES = ("vel_mean", "vel_var", "acc_mean", "acc_var", "h_s", "h_t")


@dataclass(eq=False)
class Window:
    pair_id: tuple[int, int]
    index: int
    start_frame: int
    length: int
    leader_slice: Trajectory
    follower_slice: Trajectory


def parse_ngsim(csv_source: str | Path | IO[str],
                column_map: dict[str, str] | None = None,
                unit_mode: str = "feet") -> list[Trajectory]:
    """Read an NGSIM-style CSV into one Trajectory per vehicle.

    ``column_map`` maps the canonical field names in ``FIELDS`` to CSV
    column names and defaults to the NGSIM names. With ``unit_mode='feet'``
    position, velocity, acceleration and vehicle length are scaled to SI.
    Rows with non-positive vehicle length are dropped.
    """
    if unit_mode not in ("feet", "meters"):
        raise ConfigError(f"unit_mode must be 'feet' or 'meters', got {unit_mode!r}")
    cmap = dict(NGSIM_COLUMNS)
    if column_map:
        unknown = set(column_map) - set(FIELDS)
        if unknown:
            raise ConfigError(f"unknown fields in column map: {sorted(unknown)}")
        cmap.update(column_map)

    df = pd.read_csv(csv_source, skipinitialspace=True, float_precision="round_trip")
    df.columns = [str(c).strip() for c in df.columns]
    for name in FIELDS:
        if cmap[name] not in df.columns:
            raise ConfigError(f"missing column {cmap[name]!r} (field {name})")
    df = df[[cmap[name] for name in FIELDS]]
    df.columns = list(FIELDS)
    for name in FIELDS:
        values = pd.to_numeric(df[name], errors="coerce")
        broken = values.isna() & df[name].notna()
        if broken.any():
            row = int(np.flatnonzero(broken.to_numpy())[0])
            raise DataError(f"column {cmap[name]!r}: non-numeric value {df[name].iloc[row]!r} "
                            f"in data row {row + 1}")
        df[name] = values

    bad = df["vehicle_length"] <= 0
    if bad.any():
        logger.warning("dropping %d rows with non-positive vehicle length", int(bad.sum()))
        df = df[~bad]

    scale = FEET_TO_METERS if unit_mode == "feet" else 1.0
    df = df.sort_values(["vehicle_id", "frame"], kind="stable")
    ids = df["vehicle_id"].to_numpy(np.int64)
    frames = df["frame"].to_numpy(np.int64)
    cols = {name: df[name].to_numpy(float) * scale
            for name in ("position", "velocity", "acceleration", "vehicle_length")}
    leaders = df["leader_id"].fillna(0).to_numpy(np.int64)

    out = []
    bounds = np.flatnonzero(np.diff(ids)) + 1
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(ids)]):
        if hi <= lo:
            continue
        out.append(Trajectory(ids[lo], frames[lo:hi], cols["position"][lo:hi],
                              cols["velocity"][lo:hi], cols["acceleration"][lo:hi],
                              leaders[lo:hi], cols["vehicle_length"][lo:hi]))
    return out


def trajectories_frame(trajectories: Iterable[Trajectory]) -> pd.DataFrame:
    parts = []
    for t in trajectories:
        parts.append(pd.DataFrame({
            "vehicle_id": np.full(len(t), t.vehicle_id, dtype=np.int64),
            "frame": t.frames,
            "position": t.position,
            "velocity": t.velocity,
            "acceleration": t.acceleration,
            "leader_id": t.leader_id,
            "vehicle_length": t.length,
        }))
    if not parts:
        return pd.DataFrame({name: [] for name in FIELDS})
    return pd.concat(parts, ignore_index=True)


def write_trajectories(trajectories: Iterable[Trajectory], path: str | Path | IO[str]) -> None:
    """Write the canonical SI trajectory CSV (re-readable with unit_mode='meters')."""
    trajectories_frame(trajectories).to_csv(path, index=False, lineterminator="\n")


def read_trajectories(path: str | Path | IO[str]) -> list[Trajectory]:
    return parse_ngsim(path, CANONICAL_COLUMNS, unit_mode="meters")


def _runs(values: np.ndarray) -> Iterator[tuple[int, int]]:
    """Half-open index ranges of constant value."""
    if len(values) == 0:
        return
    cuts = np.flatnonzero(np.diff(values)) + 1
    yield from zip(np.r_[0, cuts].tolist(), np.r_[cuts, len(values)].tolist())


def _longest_true_run(mask: np.ndarray) -> tuple[int, int]:
    best = (0, 0)
    for lo, hi in _runs(mask.astype(np.int8)):
        if mask[lo] and hi - lo > best[1] - best[0]:
            best = (lo, hi)
    return best


def extract_pairs(trajectories: Iterable[Trajectory], min_frames: int = 700) -> list[VehiclePair]:
    """Leader-follower pairs with a constant leader for at least ``min_frames``.

    Each constant-leader span of a follower is clipped to the leader's
    coverage and to the frames where the leader is ahead; the longest
    qualifying segment per (leader, follower) is kept.
    """
    if min_frames < 1:
        raise ConfigError("min_frames must be >= 1")
    by_id = {t.vehicle_id: t for t in trajectories}
    best: dict[tuple[int, int], tuple[int, int]] = {}
    for fid in sorted(by_id):
        fol = by_id[fid]
        for lo, hi in _runs(fol.leader_id):
            lid = int(fol.leader_id[lo])
            if lid == 0 or lid == fid or lid not in by_id or hi - lo < min_frames:
                continue
            lead = by_id[lid]
            start = max(int(fol.frames[lo]), lead.start_frame)
            stop = min(int(fol.frames[hi - 1]), lead.end_frame) + 1
            if stop - start < min_frames:
                continue
            ahead = (lead.between(start, stop).position
                     >= fol.between(start, stop).position)
            a, b = _longest_true_run(ahead)
            if b - a < min_frames:
                continue
            span = (start + a, start + b)
            prev = best.get((lid, fid))
            if prev is None or span[1] - span[0] > prev[1] - prev[0]:
                best[(lid, fid)] = span
    pairs = []
    for (lid, fid), (start, stop) in sorted(best.items()):
        pairs.append(VehiclePair(by_id[lid].between(start, stop), by_id[fid].between(start, stop)))
    return pairs


def compute_features(pair: VehiclePair) -> FeatureVector:
    """Follower speed/acceleration moments and mean space/time headway."""
    if pair.n_frames < 2:
        raise DataError(f"pair {pair.pair_id}: need at least 2 frames for features")
    v = pair.follower.velocity
    a = pair.follower.acceleration
    spacing = pair.spacing
    return FeatureVector(
        vel_mean=float(np.mean(v)),
        vel_var=float(np.var(v)),
        acc_mean=float(np.mean(a)),
        acc_var=float(np.var(a)),
        h_s=float(np.mean(spacing)),
        h_t=float(np.mean(spacing / np.maximum(v, EPS_V))),
    )


def window_count(n_frames: int, window_len: int, stride: int) -> int:
    if n_frames < window_len:
        return 0
    return (n_frames - window_len) // stride + 1


def slice_windows(pair: VehiclePair, window_len: int = 5, stride: int | None = None) -> list[Window]:
    """Cut the pair's overlap into fixed-length windows; a short tail is dropped."""
    stride = window_len if stride is None else stride
    if window_len < 1 or stride < 1:
        raise ConfigError("window_len and stride must be >= 1")
    if window_len > pair.n_frames:
        raise DataError(
            f"pair {pair.pair_id}: window length {window_len} exceeds overlap of {pair.n_frames} frames")
    first = pair.overlap[0]
    windows = []
    for k in range(window_count(pair.n_frames, window_len, stride)):
        start = first + k * stride
        windows.append(Window(pair.pair_id, k, start, window_len,
                              pair.leader.between(start, start + window_len),
                              pair.follower.between(start, start + window_len)))
    return windows
