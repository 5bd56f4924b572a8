"""Krauss and Wiedemann (W99, ten-parameter) car-following simulators.

The follower is advanced with forward Euler where the position update uses
the speed *before* the update::

    v[k+1] = v_next(state[k])
    x[k+1] = x[k] + v[k] * dt

The leader is replayed from data.

Krauss
------
Safe speed with tau = t_r + t_i / 2 and bumper-to-bumper gap g::

    v_safe = -b*tau + sqrt(b^2 tau^2 + v_l^2 + 2 b g)
    v_next = max(0, min(v_max, v + a*dt, v_safe))

Wiedemann
---------
The perception thresholds (front-to-front distance s, speed difference
dv = v - v_l, v_slow = min(v, v_l)) are::

    AX   = l_lead + AX_add
    ABX  = AX + BX_add * sqrt(v_slow)
    SDX  = SDX_mult * ABX
    SDV  = ((s - AX) / CX)^2
    OPDV = -OPDV_add * SDV

and the ten W99 values CC0..CC9 set the tuners as

    AX_add = CC0, BX_add = CC1 * sqrt(v_slow)  (so ABX = AX + CC1 * v_slow),
    SDX_mult = 1 + CC2 / ABX                     (so SDX = ABX + CC2),
    CX = 100 / sqrt(CC6)                         (so SDV = CC6 (s-AX)^2 / 1e4),
    OPDV_add = 1.

Regimes, checked in order:

* emergency      s < ABX: brake at -b_max
* closing        dv > SDV - CC4 and s < SDX - CC3 (dv + CC4): the
                 deceleration -dv^2 / (2 (s - ABX)) that cancels dv at ABX
* following      dv >= OPDV - CC5 and s < SDX: -CC7 * sign(dv)
* free-driving   otherwise: CC8 at standstill blending linearly to CC9 at
                 80 km/h, limited so that v does not pass v_max

Every acceleration is clipped to [-b_max, a_max].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .trajdata import DT, Trajectory, VehiclePair

V80 = 80.0 / 3.6
# Krauss speeds below this snap to standstill; without it the follower creeps
# toward a stopped leader until position round-off closes the gap
STOP_SPEED = 1e-6

FREE, CLOSING, FOLLOWING, EMERGENCY = "free-driving", "closing", "following", "emergency"


@dataclass(frozen=True)
class SimContext:
    dt: float = DT
    v_max: float = 30.0
    a_max: float = 2.6
    b_max: float = 4.5

    def __post_init__(self):
        for name in ("dt", "v_max", "a_max", "b_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"SimContext.{name} must be positive")


@dataclass(frozen=True)
class ModelKind:
    """Parameter layout, bound box and defaults of one car-following model."""

    name: str
    param_names: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    defaults: tuple[float, ...]

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def bounds(self) -> np.ndarray:
        return np.column_stack([self.lower, self.upper]).astype(float)

    def with_bounds(self, bounds: np.ndarray | None = None,
                    defaults: Sequence[float] | None = None) -> "ModelKind":
        b = self.bounds if bounds is None else np.asarray(bounds, float)
        d = self.defaults if defaults is None else tuple(float(x) for x in defaults)
        if b.shape != (self.n_params, 2) or np.any(b[:, 0] >= b[:, 1]):
            raise ConfigError(f"{self.name}: bounds must be {self.n_params} rows of lo < hi")
        if len(d) != self.n_params:
            raise ConfigError(f"{self.name}: expected {self.n_params} default values")
        kind = ModelKind(self.name, self.param_names, tuple(b[:, 0]), tuple(b[:, 1]), d)
        kind.check(d)
        return kind

    def check(self, params: Sequence[float]) -> np.ndarray:
        p = np.asarray(params, dtype=float)
        if p.shape != (self.n_params,):
            raise ConfigError(f"{self.name}: expected {self.n_params} parameters, got shape {p.shape}")
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        bad = np.flatnonzero((p < lo) | (p > hi))
        if len(bad):
            k = int(bad[0])
            raise ConfigError(f"{self.name}: {self.param_names[k]}={p[k]} outside [{lo[k]}, {hi[k]}]")
        return p


KRAUSS = ModelKind("krauss", ("t_r", "t_i"), (0.1, 0.01), (3.0, 1.0), (1.5, 0.15))

WIEDEMANN = ModelKind(
    "wiedemann",
    ("cc0", "cc1", "cc2", "cc3", "cc4", "cc5", "cc6", "cc7", "cc8", "cc9"),
    (0.5, 0.3, 0.5, -15.0, -2.0, 0.05, 0.0, 0.05, 0.5, 0.2),
    (5.0, 3.0, 10.0, -1.0, -0.05, 2.0, 20.0, 1.0, 5.0, 3.0),
    (1.5, 0.9, 4.0, -8.0, -0.35, 0.35, 11.44, 0.25, 3.5, 1.5),
)

MODELS = {KRAUSS.name: KRAUSS, WIEDEMANN.name: WIEDEMANN}


def get_model(name: str) -> ModelKind:
    try:
        return MODELS[name]
    except KeyError:
        raise ConfigError(f"unknown model kind {name!r}; expected one of {sorted(MODELS)}") from None


@dataclass(frozen=True)
class KraussParams:
    t_r: float = 1.5
    t_i: float = 0.15

    def __post_init__(self):
        KRAUSS.check([self.t_r, self.t_i])

    @property
    def tau(self) -> float:
        return self.t_r + 0.5 * self.t_i

    def as_array(self) -> np.ndarray:
        return np.array([self.t_r, self.t_i])


@dataclass(frozen=True)
class WiedemannParams:
    cc: tuple[float, ...] = WIEDEMANN.defaults

    def __post_init__(self):
        p = WIEDEMANN.check(self.cc)
        object.__setattr__(self, "cc", tuple(float(x) for x in p))
        if min(p[[0, 1, 2, 7, 8, 9]]) <= 0:
            raise ConfigError("CC0, CC1, CC2, CC7, CC8 and CC9 must be positive")

    def as_array(self) -> np.ndarray:
        return np.array(self.cc)


@dataclass(frozen=True)
class FollowState:
    x: float
    v: float
    x_l: float
    v_l: float
    l_lead: float

    @property
    def gap(self) -> float:
        """Bumper-to-bumper gap."""
        return self.x_l - self.x - self.l_lead

    @property
    def spacing(self) -> float:
        """Front-to-front distance."""
        return self.x_l - self.x


@dataclass(frozen=True)
class ThresholdTuners:
    ax_add: float
    bx_add: float
    sdx_mult: float
    cx: float
    opdv_add: float


@dataclass(frozen=True)
class Thresholds:
    ax: float
    abx: float
    sdx: float
    sdv: float
    opdv: float


def _as_vector(params) -> np.ndarray:
    if isinstance(params, (KraussParams, WiedemannParams)):
        return params.as_array()
    return np.asarray(params, dtype=float)


def _safe_speed(gap: float, v_l: float, tau: float, b: float) -> float:
    if gap < 0:
        return 0.0
    bt = b * tau
    return max(0.0, -bt + math.sqrt(bt * bt + v_l * v_l + 2.0 * b * gap))


def krauss_safe_speed(state: FollowState, params, ctx: SimContext) -> float:
    """Largest speed that still allows stopping behind a braking leader.

    Returns 0 for a negative gap (the caller flags the collision).
    """
    t_r, t_i = _as_vector(params)
    return _safe_speed(state.gap, state.v_l, t_r + 0.5 * t_i, ctx.b_max)


def krauss_desired_speed(state: FollowState, params, ctx: SimContext) -> float:
    v_safe = krauss_safe_speed(state, params, ctx)
    v_des = min(ctx.v_max, state.v + ctx.a_max * ctx.dt, v_safe)
    return v_des if v_des >= STOP_SPEED else 0.0


def euler_step(x: float, v: float, v_next: float, dt: float) -> tuple[float, float]:
    return x + v * dt, max(v_next, 0.0)


def wiedemann_tuners(state: FollowState, params) -> ThresholdTuners:
    cc = _as_vector(params)
    v_slow = max(min(state.v, state.v_l), 0.0)
    ax = state.l_lead + cc[0]
    abx = ax + cc[1] * v_slow
    cx = math.inf if cc[6] <= 0 else 100.0 / math.sqrt(cc[6])
    return ThresholdTuners(ax_add=cc[0], bx_add=cc[1] * math.sqrt(v_slow),
                           sdx_mult=1.0 + cc[2] / abx, cx=cx, opdv_add=1.0)


def wiedemann_thresholds(state: FollowState, tuners: ThresholdTuners) -> Thresholds:
    if tuners.cx == 0:
        raise ConfigError("CX must be non-zero")
    v_slow = max(min(state.v, state.v_l), 0.0)
    ax = state.l_lead + tuners.ax_add
    abx = ax + tuners.bx_add * math.sqrt(v_slow)
    sdx = tuners.sdx_mult * abx
    sdv = ((state.spacing - ax) / tuners.cx) ** 2
    return Thresholds(ax=ax, abx=abx, sdx=sdx, sdv=sdv, opdv=-sdv * tuners.opdv_add)


def _w99_accel(s: float, l_lead: float, v: float, v_l: float, cc, ctx: SimContext) -> tuple[float, str]:
    # inlined wiedemann_tuners + wiedemann_thresholds; this runs once per frame
    v_slow = v if v < v_l else v_l
    if v_slow < 0.0:
        v_slow = 0.0
    ax = l_lead + cc[0]
    abx = ax + cc[1] * v_slow
    sdx = abx + cc[2]
    sdv = cc[6] * (s - ax) ** 2 / 1e4
    dv = v - v_l
    if s < abx:
        acc, regime = -ctx.b_max, EMERGENCY
    elif dv > sdv - cc[4] and s < sdx - cc[3] * (dv + cc[4]):
        room = s - abx
        acc = -ctx.b_max if room <= 1e-9 else -dv * dv / (2.0 * room)
        regime = CLOSING
    elif dv >= -sdv - cc[5] and s < sdx:
        acc = -cc[7] if dv > 0 else (cc[7] if dv < 0 else 0.0)
        regime = FOLLOWING
    else:
        frac = min(v, V80) / V80
        acc = cc[8] + (cc[9] - cc[8]) * frac
        acc = min(acc, (ctx.v_max - v) / ctx.dt)
        regime = FREE
    return min(max(acc, -ctx.b_max), ctx.a_max), regime


def wiedemann_step(state: FollowState, params, ctx: SimContext) -> tuple[float, str]:
    """Acceleration and regime tag for one W99 step."""
    return _w99_accel(state.spacing, state.l_lead, state.v, state.v_l, _as_vector(params), ctx)


class ParamSchedule:
    """Piecewise-constant parameters over half-open frame segments."""

    def __init__(self, starts: Sequence[int], stops: Sequence[int], params: np.ndarray):
        self.starts = np.asarray(starts, dtype=np.int64)
        self.stops = np.asarray(stops, dtype=np.int64)
        self.params = np.atleast_2d(np.asarray(params, dtype=float))
        if not (len(self.starts) == len(self.stops) == len(self.params)):
            raise DataError("schedule segments and parameter rows differ in count")
        if np.any(self.stops <= self.starts) or np.any(self.starts[1:] < self.stops[:-1]):
            raise DataError("schedule segments must be non-empty and ordered without overlap")

    @classmethod
    def constant(cls, params, start: int, stop: int) -> "ParamSchedule":
        return cls([start], [stop], [_as_vector(params)])

    @classmethod
    def from_windows(cls, starts: Sequence[int], window_len: int, params: np.ndarray) -> "ParamSchedule":
        """Window j's parameters hold until window j+1 starts; the last holds to its end."""
        starts = list(starts)
        stops = starts[1:] + [starts[-1] + window_len] if starts else []
        return cls(starts, stops, params)

    def __len__(self) -> int:
        return len(self.starts)

    def for_frames(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.int64)
        idx = np.searchsorted(self.starts, frames, side="right") - 1
        ok = (idx >= 0) & (frames < self.stops[np.clip(idx, 0, None)])
        if not np.all(ok):
            missing = frames[~ok]
            raise DataError(f"parameter schedule does not cover frame {int(missing[0])}"
                            f" ({len(missing)} frames uncovered)")
        return self.params[idx]

    def restricted(self, start: int, stop: int) -> "ParamSchedule":
        starts = np.clip(self.starts, start, stop)
        stops = np.clip(self.stops, start, stop)
        keep = stops > starts
        return ParamSchedule(starts[keep], stops[keep], self.params[keep])


@dataclass(eq=False)
class SimResult:
    frames: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    gap: np.ndarray
    collision: np.ndarray
    regime: list[str] | None = None

    @property
    def n_collisions(self) -> int:
        return int(np.count_nonzero(self.collision))

    def to_trajectory(self, vehicle_id: int, length: float, leader_id: int = 0, dt: float = DT) -> Trajectory:
        acc = np.append(np.diff(self.velocity) / dt, 0.0)
        return Trajectory(vehicle_id, self.frames, self.position, self.velocity, acc,
                          leader_id, length, dt)


def simulate_follower(model: str | ModelKind, schedule, leader: Trajectory, x0: float, v0: float,
                      ctx: SimContext = SimContext()) -> SimResult:
    """Replay ``leader`` and advance a simulated follower frame by frame.

    ``schedule`` is a ParamSchedule or one parameter vector used throughout.
    The output is aligned with the leader's frames and starts at (x0, v0).
    """
    kind = get_model(model) if isinstance(model, str) else model
    if len(leader) == 0:
        raise DataError("empty leader trajectory")
    if isinstance(schedule, ParamSchedule):
        table = schedule.for_frames(leader.frames)
    else:
        table = np.broadcast_to(_as_vector(schedule), (len(leader), kind.n_params))
    return _simulate(kind.name, table, leader.frames, leader.position.tolist(),
                     leader.velocity.tolist(), leader.length.tolist(), x0, v0, ctx)


def simulate_pair(model: str | ModelKind, schedule, pair: VehiclePair,
                  ctx: SimContext = SimContext()) -> SimResult:
    """Simulate the follower of ``pair`` starting from its recorded first state."""
    return simulate_follower(model, schedule, pair.leader, float(pair.follower.position[0]),
                             float(pair.follower.velocity[0]), ctx)


def _simulate(name: str, table, frames, lx, lv, ll, x0: float, v0: float, ctx: SimContext,
              record_regime: bool = False) -> SimResult:
    n = len(lx)
    xs = [0.0] * n
    vs = [0.0] * n
    x, v = float(x0), max(float(v0), 0.0)
    dt, v_max, a_max, b = ctx.dt, ctx.v_max, ctx.a_max, ctx.b_max
    constant = isinstance(table, np.ndarray) and table.strides[0] == 0
    regimes = [] if record_regime else None
    if name == "krauss":
        if constant:
            tau = float(table[0, 0]) + 0.5 * float(table[0, 1])
        for k in range(n):
            xs[k], vs[k] = x, v
            if k == n - 1:
                break
            if not constant:
                tau = float(table[k, 0]) + 0.5 * float(table[k, 1])
            v_next = min(v_max, v + a_max * dt, _safe_speed(lx[k] - x - ll[k], lv[k], tau, b))
            x, v = x + v * dt, (v_next if v_next >= STOP_SPEED else 0.0)
    elif name == "wiedemann":
        cc = table[0].tolist() if constant else None
        for k in range(n):
            xs[k], vs[k] = x, v
            if k == n - 1:
                break
            if not constant:
                cc = table[k].tolist()
            acc, regime = _w99_accel(lx[k] - x, ll[k], v, lv[k], cc, ctx)
            if record_regime:
                regimes.append(regime)
            v_next = min(max(v + acc * dt, 0.0), v_max)
            x, v = x + v * dt, v_next
    else:
        raise ConfigError(f"unknown model kind {name!r}")
    pos = np.array(xs)
    gap = np.asarray(lx) - pos - np.asarray(ll)
    return SimResult(np.asarray(frames), pos, np.array(vs), gap, gap < 0, regimes)
