import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptcf.carfollow import (CLOSING, EMERGENCY, FOLLOWING, FREE, KRAUSS, WIEDEMANN, FollowState,
                               KraussParams, ParamSchedule, SimContext, ThresholdTuners, WiedemannParams,
                               euler_step, get_model, krauss_desired_speed, krauss_safe_speed,
                               simulate_follower, simulate_pair, wiedemann_step, wiedemann_thresholds,
                               wiedemann_tuners)
from adaptcf.errors import ConfigError, DataError
from adaptcf.synth import follow, make_leader, random_leader_speeds


def state(gap, v=0.0, v_l=0.0, l_lead=5.0):
    return FollowState(x=0.0, v=v, x_l=gap + l_lead, v_l=v_l, l_lead=l_lead)


def test_safe_speed_zero_gap_stopped_leader():
    assert krauss_safe_speed(state(0.0), KraussParams(1.0, 0.1), SimContext()) == 0.0


def test_safe_speed_hand_value():
    # b = 2, tau = 1 (t_r 0.9, t_i 0.2), v_l = 10, g = 10 -> -2 + sqrt(4 + 100 + 40) = 10
    ctx = SimContext(b_max=2.0)
    assert krauss_safe_speed(state(10.0, v_l=10.0), KraussParams(0.9, 0.2), ctx) == pytest.approx(10.0)


def test_safe_speed_negative_gap_is_zero():
    assert krauss_safe_speed(state(-1.0, v_l=20.0), KraussParams(), SimContext()) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 500), st.floats(0, 500), st.floats(0, 40), st.floats(0, 40),
       st.floats(0.1, 3.0), st.floats(0.01, 1.0))
def test_safe_speed_monotone(g1, g2, v1, v2, t_r, t_i):
    p, ctx = KraussParams(t_r, t_i), SimContext()
    lo_g, hi_g = sorted([g1, g2])
    lo_v, hi_v = sorted([v1, v2])
    assert krauss_safe_speed(state(lo_g, v_l=lo_v), p, ctx) <= krauss_safe_speed(state(hi_g, v_l=lo_v), p, ctx)
    assert krauss_safe_speed(state(lo_g, v_l=lo_v), p, ctx) <= krauss_safe_speed(state(lo_g, v_l=hi_v), p, ctx)


def test_safe_speed_grows_with_gap():
    speeds = [krauss_safe_speed(state(g, v_l=5.0), KraussParams(), SimContext()) for g in (1e2, 1e4, 1e6)]
    assert speeds[0] < speeds[1] < speeds[2] and speeds[2] > 1000


def test_desired_speed_min_of_three():
    ctx = SimContext(v_max=30.0, a_max=2.0)
    # large gap so v_safe is far above the other two terms
    far = FollowState(0.0, 10.0, 1e4, 30.0, 5.0)
    assert krauss_desired_speed(far, KraussParams(), ctx) == pytest.approx(10.2)
    near = FollowState(0.0, 29.95, 1e4, 30.0, 5.0)
    assert krauss_desired_speed(near, KraussParams(), ctx) == pytest.approx(30.0)
    # pick a gap where v_safe = 5 exactly: g = (v^2 + 2 b tau v - v_l^2) / (2b) with v_l = 0
    b, tau = ctx.b_max, KraussParams().tau
    g = (25 + 2 * b * tau * 5) / (2 * b)
    assert krauss_desired_speed(state(g, v=10.0), KraussParams(), ctx) == pytest.approx(5.0)


def test_euler_step():
    assert euler_step(0.0, 10.0, 10.1, 0.1) == pytest.approx((1.0, 10.1))
    assert euler_step(3.0, 1.0, -1.0, 0.1)[1] == 0.0


def test_euler_constant_acceleration():
    x, v = 0.0, 0.0
    for _ in range(10):
        x, v = euler_step(x, v, v + 1.0 * 0.1, 0.1)
    assert v == pytest.approx(1.0, abs=1e-12)
    # sum of v_k dt for v_k = 0, 0.1, ..., 0.9
    assert x == pytest.approx(0.45, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 30), st.floats(-3, 3), st.integers(1, 50))
def test_euler_matches_closed_form_speed(v0, a, steps):
    v = v0
    for k in range(steps):
        _, v_new = euler_step(0.0, v, v + a * 0.1, 0.1)
        expected = max(v0 + a * 0.1 * (k + 1), 0.0) if v + a * 0.1 >= 0 else 0.0
        if v + a * 0.1 < 0:
            assert v_new == 0.0
            break
        assert abs(v_new - (v + a * 0.1)) <= 1e-12
        v = v_new
        assert abs(v - expected) <= 1e-9


def test_thresholds_hand_values():
    st_ = FollowState(x=0.0, v=4.0, x_l=16.5, v_l=9.0, l_lead=5.0)
    thr = wiedemann_thresholds(st_, ThresholdTuners(ax_add=1.5, bx_add=0.75, sdx_mult=1.5, cx=10.0, opdv_add=1.0))
    assert thr.ax == pytest.approx(6.5)
    assert thr.abx == pytest.approx(6.5 + 0.75 * 2.0)
    assert thr.sdx == pytest.approx(1.5 * thr.abx)
    assert thr.sdv == pytest.approx(1.0)
    assert thr.opdv == pytest.approx(-1.0)


def test_thresholds_sdx_from_abx():
    st_ = FollowState(x=0.0, v=0.0, x_l=20.0, v_l=0.0, l_lead=6.5)
    thr = wiedemann_thresholds(st_, ThresholdTuners(0.0, 0.0, 1.5, 10.0, 1.0))
    assert thr.abx == pytest.approx(6.5) and thr.sdx == pytest.approx(9.75)
    with pytest.raises(ConfigError):
        wiedemann_thresholds(st_, ThresholdTuners(0.0, 0.0, 1.5, 0.0, 1.0))


def test_tuner_mapping_from_cc():
    p = WiedemannParams()
    s = FollowState(x=0.0, v=9.0, x_l=40.0, v_l=16.0, l_lead=4.5)
    thr = wiedemann_thresholds(s, wiedemann_tuners(s, p))
    cc = p.cc
    assert thr.ax == pytest.approx(4.5 + cc[0])
    assert thr.abx == pytest.approx(thr.ax + cc[1] * 9.0)
    assert thr.sdx == pytest.approx(thr.abx + cc[2])
    assert thr.sdv == pytest.approx(cc[6] * (40.0 - thr.ax) ** 2 / 1e4)
    assert thr.sdx >= thr.abx >= thr.ax


def test_wiedemann_regimes():
    ctx, p = SimContext(), WiedemannParams()
    acc, regime = wiedemann_step(FollowState(0.0, 10.0, 500.0, 10.0, 4.5), p, ctx)
    assert regime == FREE and acc > 0
    acc, regime = wiedemann_step(FollowState(0.0, 10.0, 6.0, 10.0, 4.5), p, ctx)
    assert regime == EMERGENCY and acc == -ctx.b_max
    acc, regime = wiedemann_step(FollowState(0.0, 20.0, 60.0, 5.0, 4.5), p, ctx)
    assert regime == CLOSING and -ctx.b_max <= acc < 0


def test_wiedemann_steady_following_bounded():
    ctx, p = SimContext(), WiedemannParams()
    v = 12.0
    s = FollowState(0.0, v, 0.0, v, 4.5)
    thr = wiedemann_thresholds(s, wiedemann_tuners(s, p))
    mid = 0.5 * (thr.abx + thr.sdx)
    acc, regime = wiedemann_step(FollowState(0.0, v, mid, v, 4.5), p, ctx)
    assert regime == FOLLOWING
    assert abs(acc) <= p.cc[7]


@settings(max_examples=200, deadline=None)
@given(st.floats(0.1, 300), st.floats(0, 30), st.floats(0, 30))
def test_wiedemann_accel_bounded(s, v, v_l):
    ctx = SimContext()
    acc, _ = wiedemann_step(FollowState(0.0, v, s, v_l, 4.5), WiedemannParams(), ctx)
    assert -ctx.b_max <= acc <= ctx.a_max


def test_wiedemann_param_checks():
    bad = list(WIEDEMANN.defaults)
    bad[7] = 0.0
    with pytest.raises(ConfigError):
        WiedemannParams(tuple(bad))
    with pytest.raises(ConfigError):
        KraussParams(5.0, 0.1)
    with pytest.raises(ConfigError):
        get_model("idm")


def test_constant_leader_convergence():
    leader = make_leader(1, np.full(400, 10.0), x0=100.0)
    pair = follow(leader, "krauss", KRAUSS.defaults, 2, gap0=40.0, v0=6.0)
    v = pair.follower.velocity
    assert np.all(np.abs(v[-50:] - 10.0) <= 0.1)


def test_schedule_gap_rejected():
    leader = make_leader(1, np.full(20, 10.0))
    sched = ParamSchedule([0, 12], [10, 20], [[1.0, 0.1], [1.2, 0.1]])
    with pytest.raises(DataError, match="frame 10"):
        simulate_follower("krauss", sched, leader, 0.0, 10.0)


def test_empty_leader_rejected():
    from adaptcf.trajdata import Trajectory
    with pytest.raises(DataError, match="empty"):
        Trajectory(1, [], [], [], [], 0, 4.5)


@pytest.mark.parametrize("kind", ["krauss", "wiedemann"])
def test_constant_schedule_equals_single_vector(kind):
    rng = np.random.default_rng(3)
    leader = make_leader(1, random_leader_speeds(rng, 300), x0=80.0)
    params = np.array(get_model(kind).defaults)
    a = simulate_follower(kind, params, leader, 30.0, 8.0)
    b = simulate_follower(kind, ParamSchedule.constant(params, 0, 300), leader, 30.0, 8.0)
    np.testing.assert_array_equal(a.velocity, b.velocity)
    np.testing.assert_array_equal(a.position, b.position)


@pytest.mark.parametrize("kind", ["krauss", "wiedemann"])
def test_speeds_within_limits_and_deterministic(kind):
    rng = np.random.default_rng(11)
    ctx = SimContext()
    leader = make_leader(1, random_leader_speeds(rng, 600, ctx), x0=60.0)
    runs = [simulate_follower(kind, get_model(kind).defaults, leader, 20.0, 5.0, ctx) for _ in range(2)]
    v = runs[0].velocity
    assert np.all(v >= 0) and np.all(v <= ctx.v_max)
    np.testing.assert_array_equal(runs[0].velocity, runs[1].velocity)
    np.testing.assert_array_equal(runs[0].position, runs[1].position)


def test_simulate_pair_reproduces_generator():
    rng = np.random.default_rng(5)
    leader = make_leader(1, random_leader_speeds(rng, 200), x0=50.0)
    pair = follow(leader, "krauss", [1.1, 0.4], 2)
    sim = simulate_pair("krauss", [1.1, 0.4], pair)
    np.testing.assert_array_equal(sim.velocity, pair.follower.velocity)
    assert sim.n_collisions == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.4, 3.0), st.floats(0.01, 1.0))
def test_krauss_collision_free(seed, t_r, t_i):
    # the lagged position update needs tau >= about 4 dt for a non-oscillating approach
    rng = np.random.default_rng(seed)
    ctx = SimContext()
    leader = make_leader(1, random_leader_speeds(rng, 600, ctx), x0=rng.uniform(5, 80) + 4.5)
    gap0 = float(rng.uniform(0, 75))
    res = simulate_follower("krauss", [t_r, t_i], leader, leader.position[0] - 4.5 - gap0,
                            rng.uniform(0, ctx.v_max), ctx)
    assert np.all(res.gap[1:] > 0)
    assert not res.collision.any()


def test_collision_flagged_not_raised():
    leader = make_leader(1, np.zeros(30), x0=10.0)
    res = simulate_follower("wiedemann", WIEDEMANN.defaults, leader, 0.0, 25.0)
    assert res.n_collisions > 0
    assert math.isfinite(res.velocity[-1])
