"""Synthetic corpora with planted car-following parameters.

Used by the tests, the acceptance suite and the ``synth`` subcommand. The
followers are produced by the package's own simulators, so a parameter
schedule that generated a pair reproduces it exactly.
"""

from __future__ import annotations

import numpy as np

from .carfollow import KRAUSS, ModelKind, ParamSchedule, SimContext, _safe_speed, simulate_follower
from .trajdata import DT, Trajectory, VehiclePair

VEHICLE_LENGTH = 4.5


def random_leader_speeds(rng: np.random.Generator, n_frames: int, ctx: SimContext = SimContext(),
                         hold=(1.0, 5.0), v0=None) -> np.ndarray:
    """Piecewise-constant accelerations in [-b_max, a_max], speed kept in [0, v_max]."""
    v = np.empty(n_frames)
    v[0] = rng.uniform(0.0, ctx.v_max) if v0 is None else v0
    k = 0
    while k < n_frames - 1:
        acc = rng.uniform(-ctx.b_max, ctx.a_max)
        steps = max(1, int(round(rng.uniform(*hold) / ctx.dt)))
        for _ in range(steps):
            if k >= n_frames - 1:
                break
            v[k + 1] = min(max(v[k] + acc * ctx.dt, 0.0), ctx.v_max)
            k += 1
    return v


def wavy_leader_speeds(n_frames: int, mean: float = 12.0, amplitudes=(3.0, 1.5),
                       periods=(17.0, 7.3), phases=(0.0, 1.0), dt: float = DT) -> np.ndarray:
    t = np.arange(n_frames) * dt
    v = np.full(n_frames, float(mean))
    for amp, period, phase in zip(amplitudes, periods, phases):
        v += amp * np.sin(2 * np.pi * t / period + phase)
    return np.maximum(v, 0.0)


def positions_from_speeds(v: np.ndarray, x0: float = 0.0, dt: float = DT) -> np.ndarray:
    # same update rule as the simulators: x[k+1] = x[k] + v[k] dt
    return x0 + np.concatenate([[0.0], np.cumsum(v[:-1] * dt)])


def make_leader(vehicle_id: int, speeds: np.ndarray, x0: float = 0.0, start_frame: int = 0,
                dt: float = DT, length: float = VEHICLE_LENGTH) -> Trajectory:
    n = len(speeds)
    acc = np.append(np.diff(speeds) / dt, 0.0)
    return Trajectory(vehicle_id, np.arange(start_frame, start_frame + n),
                      positions_from_speeds(speeds, x0, dt), speeds, acc, 0, length, dt)


def follow(leader: Trajectory, model: str | ModelKind, schedule, follower_id: int,
           gap0: float | None = None, v0: float | None = None,
           ctx: SimContext = SimContext(), length: float = VEHICLE_LENGTH) -> VehiclePair:
    """Simulate a follower behind ``leader`` and package both as a pair.

    Without explicit initial conditions the follower starts at the leader's
    speed with gap v * tau (the Krauss equilibrium for the first parameters).
    """
    v_l0 = float(leader.velocity[0])
    if gap0 is None or v0 is None:
        first = (schedule.params[0] if isinstance(schedule, ParamSchedule)
                 else np.asarray(schedule, float))
        tau = first[0] + 0.5 * first[1] if len(first) == 2 else 1.5
        if gap0 is None:
            gap0 = max(v_l0 * tau, 2.0)
        if v0 is None:
            v0 = min(v_l0, _safe_speed(gap0, v_l0, tau, ctx.b_max))
    x0 = float(leader.position[0]) - float(leader.length[0]) - gap0
    sim = simulate_follower(model, schedule, leader, x0, v0, ctx)
    fol = sim.to_trajectory(follower_id, length, leader.vehicle_id, leader.dt)
    return VehiclePair(leader, fol)


def sinusoid_krauss_table(times: np.ndarray, t_r_mean: float = 1.2, t_r_amp: float = 0.7,
                          period_s: float = 24.0, t_i: float = 0.3, phase: float = 0.0) -> np.ndarray:
    """Rows of (t_r, t_i) with t_r oscillating over ``times`` (seconds)."""
    t_r = t_r_mean + t_r_amp * np.sin(2 * np.pi * np.asarray(times) / period_s + phase)
    return np.column_stack([np.clip(t_r, *KRAUSS.bounds[0]), np.full(len(t_r), t_i)])


def planted_constant_pair(params=(1.0, 0.3), n_frames: int = 839, seed: int = 0,
                          leader_id: int = 1, follower_id: int = 2,
                          ctx: SimContext = SimContext()) -> VehiclePair:
    """Krauss follower with constant parameters behind a wavy leader."""
    rng = np.random.default_rng(seed)
    speeds = wavy_leader_speeds(n_frames, mean=rng.uniform(8, 16),
                                amplitudes=(rng.uniform(2, 4), rng.uniform(0.5, 2)),
                                phases=tuple(rng.uniform(0, 2 * np.pi, 2)))
    leader = make_leader(leader_id, speeds, x0=200.0)
    return follow(leader, "krauss", np.asarray(params, float), follower_id, ctx=ctx)


def planted_sinusoid_pair(n_frames: int = 839, window_len: int = 5, seed: int = 0,
                          leader_id: int = 1, follower_id: int = 2, period_s: float = 24.0,
                          ctx: SimContext = SimContext()) -> tuple[VehiclePair, np.ndarray]:
    """Krauss follower whose reaction time varies sinusoidally, window by window.

    Returns the pair and the per-window parameter table that generated it.
    """
    rng = np.random.default_rng(seed)
    speeds = wavy_leader_speeds(n_frames, mean=rng.uniform(10, 14),
                                amplitudes=(rng.uniform(3, 4), rng.uniform(1, 2)),
                                phases=tuple(rng.uniform(0, 2 * np.pi, 2)))
    leader = make_leader(leader_id, speeds, x0=200.0)
    n_windows = -(-n_frames // window_len)
    centres = (np.arange(n_windows) * window_len + window_len / 2) * DT
    table = sinusoid_krauss_table(centres, period_s=period_s, phase=rng.uniform(0, 2 * np.pi))
    starts = np.arange(n_windows) * window_len
    schedule = ParamSchedule(starts, np.minimum(starts + window_len, n_frames), table)
    return follow(leader, "krauss", schedule, follower_id, ctx=ctx), table


def style_corpus(n_pairs: int = 94, n_frames: int = 750, seed: int = 0,
                 ctx: SimContext = SimContext()) -> list[Trajectory]:
    """Independent leader-follower pairs with varied Krauss drivers.

    Leaders get ids 1..n_pairs and followers 1001..1000+n_pairs; each pair
    sits on its own stretch of road so pairs never interact.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_pairs):
        speeds = wavy_leader_speeds(n_frames, mean=rng.uniform(5, 22),
                                    amplitudes=(rng.uniform(0.5, 4), rng.uniform(0.2, 2)),
                                    periods=(rng.uniform(10, 30), rng.uniform(4, 9)),
                                    phases=tuple(rng.uniform(0, 2 * np.pi, 2)))
        leader = make_leader(i + 1, speeds, x0=200.0 + 5000.0 * i)
        params = np.array([rng.uniform(0.5, 2.5), rng.uniform(0.05, 0.8)])
        pair = follow(leader, "krauss", params, 1001 + i, ctx=ctx)
        out.extend([pair.leader, pair.follower])
    return out
