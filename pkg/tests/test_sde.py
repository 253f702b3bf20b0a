import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from safelearn.sde import (BenchmarkControl, ControlPoint, IntegrationError, SystemSpec,
                           benchmark_control, benchmark_regions, benchmark_system,
                           draws_per_path, eval_control, integrate_paths, noise_amplitude,
                           path_streams, reset)


def brownian_1d(t_max=1.0, sigma=1.0):
    return SystemSpec(state_dim=1, control_param_dim=0,
                      drift=lambda x, u: np.zeros_like(x),
                      diffusion=lambda x, u: np.full_like(x, sigma),
                      initial_mean=[0.0], initial_std=0.0, t_max=t_max)


def hand_euler(theta, n_steps, t_max=20.0, v=2.0, kappa=0.5, t_explo=6.0, u_max=4.0):
    # deterministic double integrator, written independently of the package
    dt = t_max / n_steps
    x = np.zeros(2)
    vel = np.zeros(2)
    out = [x.copy()]
    m = len(theta)
    for k in range(n_steps):
        t = k * dt
        if t <= t_explo:
            i = min(int(math.floor(t * m / t_explo)), m - 1)
            u = v * np.array([math.cos(theta[i]), math.sin(theta[i])]) - vel
        else:
            d = -x
            nd = math.hypot(*d)
            u = kappa * ((v * d / nd if nd > 0 else 0.0) - vel)
        u = np.clip(u, -u_max, u_max)
        x, vel = x + dt * vel, vel + dt * u
        out.append(x.copy())
    return np.array(out)


class TestDeterministicLimit:
    @pytest.mark.parametrize("theta", [(-math.pi / 3, math.pi / 3), (0.0, 2.0), (3.0, -1.0)])
    def test_zero_noise_matches_hand_integration(self, theta):
        spec = benchmark_system(amplitude=0.0, initial_std=0.0)
        batch = integrate_paths(spec, benchmark_control(theta), q=3, n_steps=400, seed=5)
        ref = hand_euler(theta, 400)
        for p in range(3):
            assert_allclose(batch.states[p, :, :2], ref, atol=1e-12)

    def test_grid(self):
        spec = benchmark_system()
        batch = integrate_paths(spec, benchmark_control((0.0, 0.0)), q=1, n_steps=500, seed=0)
        assert batch.time_grid[-1] == pytest.approx(20.0)
        assert batch.states.shape == (1, 501, 4)
        half = integrate_paths(spec, benchmark_control((0.0, 0.0)), q=1, n_steps=100, seed=0,
                               horizon=6.0)
        assert half.time_grid[-1] == pytest.approx(6.0)


class TestReproducibility:
    def test_same_seed_same_paths(self):
        spec = benchmark_system()
        ctl = benchmark_control((1.0, 2.0))
        a = integrate_paths(spec, ctl, q=4, n_steps=100, seed=11)
        b = integrate_paths(spec, ctl, q=4, n_steps=100, seed=11)
        assert_array_equal(a.states, b.states)

    def test_path_independent_of_batch_size(self):
        spec = benchmark_system()
        ctl = benchmark_control((0.7, 0.7))
        small = integrate_paths(spec, ctl, q=2, n_steps=100, seed=3)
        large = integrate_paths(spec, ctl, q=6, n_steps=100, seed=3)
        assert_array_equal(small.states, large.states[:2])

    def test_different_seeds_differ(self):
        spec = benchmark_system()
        ctl = benchmark_control((0.7, 0.7))
        a = integrate_paths(spec, ctl, q=2, n_steps=100, seed=3)
        b = integrate_paths(spec, ctl, q=2, n_steps=100, seed=4)
        assert not np.array_equal(a.states, b.states)

    def test_streams_keyed(self):
        a = path_streams(9, [(0,), (1,)], 10)
        b = path_streams(9, [(1,)], 10)
        assert_array_equal(a[1], b[0])

    def test_reset_draws_initial_law(self):
        spec = benchmark_system(initial_std=0.1)
        assert_array_equal(reset(spec, 1), reset(spec, 1))
        assert reset(spec, 1).shape == (4,)
        assert_array_equal(reset(spec, 1)[2:], 0.0)


class TestControl:
    @given(st.floats(0, 20), st.lists(st.floats(-50, 50), min_size=4, max_size=4),
           st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
    def test_clipped(self, t, state, a, b):
        ctl = benchmark_control((a, b))
        u = ctl(t, np.array([state]))
        assert np.all(np.abs(u) <= ctl.u_max)

    def test_default_limit_is_twice_speed(self):
        assert BenchmarkControl(directions=np.zeros(2), speed=3.0).u_max == 6.0

    def test_direction_schedule(self):
        ctl = benchmark_control((0.0, math.pi / 2))
        zero = np.zeros((1, 4))
        assert_allclose(ctl(2.9, zero), [[2.0, 0.0]], atol=1e-12)
        assert_allclose(ctl(3.1, zero), [[0.0, 2.0]], atol=1e-12)
        # last interval includes t_explo itself
        assert_allclose(ctl(6.0, zero), [[0.0, 2.0]], atol=1e-12)

    def test_return_phase_points_home(self):
        ctl = benchmark_control((0.0, 0.0))
        u = eval_control(ctl, 10.0, np.array([[3.0, 4.0]]), np.zeros((1, 2)))
        assert_allclose(u, [[-0.6, -0.8]])
        assert_allclose(eval_control(ctl, 10.0, np.zeros((1, 2)), np.ones((1, 2))), [[-0.5, -0.5]])

    def test_per_path_directions(self):
        ctl = BenchmarkControl(directions=np.array([[0.0, 0.0], [math.pi, math.pi]]))
        u = ctl(0.0, np.zeros((2, 4)))
        assert_allclose(u, [[2.0, 0.0], [-2.0, 0.0]], atol=1e-12)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            benchmark_control((0.0, 0.0), speed=0.0)


class TestSystem:
    def test_noise_bump(self):
        assert noise_amplitude(np.array([5.0, 5.0])) == pytest.approx(5.0)
        assert noise_amplitude(np.array([7.0, 5.0])) == pytest.approx(5.0 * math.exp(-0.5))

    def test_regions(self):
        reg = benchmark_regions()
        pts = np.array([[0.0, 0.0], [9.9, -9.9], [10.0, 0.0], [0.0, 10.5], [2.5, 0.0], [2.0, 2.0]])
        assert list(reg.safe_indicator(pts) >= 0) == [True, True, True, False, True, True]
        assert list(reg.reset_indicator(pts) >= 0) == [True, False, False, False, True, False]

    def test_draws_per_path(self):
        assert draws_per_path(benchmark_system(), 500) == 2 + 1000
        assert draws_per_path(brownian_1d(), 10) == 11

    def test_brownian_variance(self):
        batch = integrate_paths(brownian_1d(t_max=2.0), None, q=4000, n_steps=20, seed=0)
        end = batch.positions_at(2.0)[:, 0]
        assert abs(end.mean()) < 4 * math.sqrt(2.0 / 4000)
        assert end.var() == pytest.approx(2.0, rel=0.1)

    def test_positions_at_snaps_to_nearest_node(self):
        batch = integrate_paths(brownian_1d(), None, q=2, n_steps=10, seed=0)
        assert_array_equal(batch.positions_at(0.31), batch.states[:, 3, :1])

    def test_blow_up_raises(self):
        spec = SystemSpec(state_dim=1, control_param_dim=0,
                          drift=lambda x, u: x**2, diffusion=lambda x, u: np.zeros_like(x),
                          initial_mean=[1.0], initial_std=0.0, t_max=10.0)
        with np.errstate(over="ignore"), pytest.raises(IntegrationError, match="path"):
            integrate_paths(spec, None, q=2, n_steps=50, seed=0)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SystemSpec(state_dim=2, control_param_dim=0, drift=None, diffusion=None,
                       initial_mean=[0.0], initial_std=0.0, t_max=1.0)
        with pytest.raises(ValueError):
            integrate_paths(brownian_1d(), None, q=0, n_steps=10, seed=0)


class TestControlPoint:
    def test_normalises(self):
        p = ControlPoint(np.array([1, 2]), 1, 2)
        assert p.theta == (1.0, 2.0) and isinstance(p.t, float)

    def test_rejects_t_beyond_horizon(self):
        with pytest.raises(ValueError):
            ControlPoint((0.0,), 3.0, 2.0)
        with pytest.raises(ValueError):
            ControlPoint((0.0,), -0.1, 2.0)
