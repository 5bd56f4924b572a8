import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from adaptcf.bayesopt import BoConfig, _ei, bo_minimize, expected_improvement, gp_fit
from adaptcf.errors import ConfigError

UNIT = [[0.0, 1.0]]


def cfg(**kw):
    return BoConfig(bounds=kw.pop("bounds", UNIT), **kw)


def test_gp_interpolates_data():
    X = np.array([[0.1], [0.4], [0.9]])
    y = np.array([3.0, -1.0, 2.0])
    gp = gp_fit(X, y, cfg())
    mean, var = gp.predict(X)
    np.testing.assert_allclose(mean, y, atol=1e-3)
    assert np.all(var < 1e-4)


def test_gp_matches_direct_solve():
    # independent posterior: explicit inverse of the kernel matrix
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(6, 2))
    y = rng.normal(size=6)
    c = cfg(bounds=[[0, 1], [0, 1]], kernel_lengthscale=0.3, kernel_variance=1.0)
    gp = gp_fit(X, y, c)
    ys = (y - y.mean()) / y.std()
    k = lambda A, B: np.exp(-0.5 * ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1) / 0.09)
    K = k(X, X) + gp.noise * np.eye(6)
    q = rng.uniform(size=(4, 2))
    mu = k(q, X) @ np.linalg.solve(K, ys)
    var = 1.0 - np.einsum("ij,ji->i", k(q, X), np.linalg.solve(K, k(X, q)))
    m, v = gp.predict(q)
    np.testing.assert_allclose(m, y.mean() + y.std() * mu, atol=1e-8)
    np.testing.assert_allclose(v, var * y.std() ** 2, atol=1e-8)


def test_two_point_midpoint():
    gp = gp_fit([[0.0], [1.0]], [0.0, 2.0], cfg(kernel_lengthscale=0.5))
    mean, _ = gp.predict([[0.5]])
    # symmetric data: midpoint prediction equals the average
    assert mean[0] == pytest.approx(1.0, abs=1e-9)


def test_duplicate_points_raise_noise():
    X = np.array([[0.3], [0.3], [0.7]])
    gp = gp_fit(X, [1.0, 1.0, 2.0], cfg(noise_floor=0.0))
    assert gp.noise > 0
    assert np.all(np.isfinite(gp.predict([[0.5]])[0]))


def test_ei_closed_form():
    # mean = best, sd = 1 -> EI = phi(0)
    assert _ei(np.array([0.0]), np.array([1.0]), 0.0)[0] == pytest.approx(0.3989, abs=1e-4)
    assert _ei(np.array([1.0]), np.array([0.0]), 2.0)[0] == 0.0
    assert _ei(np.array([0.0]), np.array([1e-30]), 0.0)[0] == 0.0


def test_ei_vanishes_at_data_and_far_above():
    X = np.array([[0.1], [0.5], [0.9]])
    y = np.array([1.0, 0.0, 1.0])
    gp = gp_fit(X, y, cfg())
    ei = expected_improvement(gp, X, y.min())
    assert np.all(ei < 1e-3)
    assert _ei(np.array([50.0]), np.array([1.0]), 0.0)[0] < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-6, 25), st.floats(-5, 5))
def test_ei_nonnegative_and_matches_integral(mean, var, best):
    ei = _ei(np.array([mean]), np.array([var]), best)[0]
    assert ei >= 0
    # numerical integral of max(best - y, 0) under N(mean, var)
    s = math.sqrt(var)
    grid = np.linspace(mean - 10 * s, mean + 10 * s, 20001)
    dens = np.exp(-0.5 * ((grid - mean) / s) ** 2) / (s * math.sqrt(2 * math.pi))
    oracle = trapezoid(np.maximum(best - grid, 0) * dens, grid)
    assert ei == pytest.approx(oracle, abs=1e-4 * max(1.0, s))


def test_minimize_quadratic():
    c = cfg(n_init=5, n_iter=20, seed=3)
    res = bo_minimize(lambda x: float((x[0] - 0.3) ** 2), c)
    grid = np.linspace(0, 1, 10001)
    assert abs(res.best_point[0] - grid[np.argmin((grid - 0.3) ** 2)]) < 0.05
    assert res.evaluations == 25


def test_minimize_2d_scaled_bounds():
    c = BoConfig(bounds=[[0.1, 3.0], [0.01, 1.0]], n_init=8, n_iter=25, seed=0)
    res = bo_minimize(lambda x: (x[0] - 1.2) ** 2 + 4 * (x[1] - 0.4) ** 2, c)
    assert res.evaluations == 33
    assert res.best_value < 0.01


def test_constant_objective():
    res = bo_minimize(lambda x: 1.0, cfg(n_init=4, n_iter=5))
    assert res.best_value == 1.0 and res.evaluations == 9


def test_incumbent_monotone_and_deterministic():
    f = lambda x: math.sin(7 * x[0]) + x[0]
    a = bo_minimize(f, cfg(n_init=4, n_iter=10, seed=9))
    b = bo_minimize(f, cfg(n_init=4, n_iter=10, seed=9))
    trace = a.incumbent_trace()
    assert np.all(np.diff(trace) <= 0)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.values, b.values)


def test_nonfinite_values_penalised():
    f = lambda x: float("nan") if x[0] > 0.5 else x[0]
    res = bo_minimize(f, cfg(n_init=6, n_iter=4, seed=2))
    assert np.all(np.isfinite(res.values))
    assert res.values.max() <= 1e6
    assert res.best_value <= 0.5


def test_initial_points_used():
    seen = []
    bo_minimize(lambda x: seen.append(x.copy()) or 0.0, cfg(n_init=3, n_iter=0), initial_points=[[0.25]])
    assert seen[0][0] == pytest.approx(0.25)


def test_points_within_bounds():
    c = BoConfig(bounds=[[-2.0, -1.0], [5.0, 6.0]], n_init=4, n_iter=6)
    res = bo_minimize(lambda x: float(np.sum(x)), c)
    assert np.all(res.points >= c.bounds[:, 0]) and np.all(res.points <= c.bounds[:, 1])


@pytest.mark.parametrize("kw", [dict(bounds=[[1.0, 0.0]]), dict(n_init=1), dict(y_transform="sqrt"),
                                dict(kernel_lengthscale=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        cfg(**kw)
