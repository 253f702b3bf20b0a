import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from safelearn.config import parse_config
from safelearn.density import ConfigurationError
from safelearn.explorer import (CandidateGrid, ExplorerState, Thresholds, certify_set, explore,
                                feasibility_map, is_feasible, iteration_seed, lcb_reset,
                                lcb_safety, select_next)
from safelearn.kernels import KernelModel, MaternKernel
from safelearn.oracles import dense_reference_solve
from safelearn.sde import ControlPoint

from reference import matern52, pairwise

THETA0 = (-math.pi / 3, math.pi / 3)

TINY = """
[control]
n_steps = 50
[learning]
theta_resolution = 7
time_resolution = 5
q_paths = 20
max_iterations = {iters}
epsilon = {eps}
xi = {eps}
eta = {eta}
selection_mode = {mode}
"""


def tiny_config(iters=6, eps=0.1, eta=0.05, mode="first"):
    return parse_config(TINY.format(iters=iters, eps=eps, eta=eta, mode=mode))


def small_grid(res=7, times=(0.0, 5.0, 10.0, 15.0, 20.0)):
    return CandidateGrid.lattice(-math.pi, math.pi, res, 2, np.array(times), 20.0, THETA0)


def model_with(points, s, r, ell=1.0, amp=1.0, time_scale=20.0):
    m = KernelModel(MaternKernel(2.5, ell, amp), time_scale=time_scale, input_dim=3)
    if len(points):
        m.set_data(np.asarray(points, dtype=float), s, r)
    return m.fit()


def synthetic_targets(z):
    # smooth, bounded stand-ins for safety / reset probabilities
    s = 0.5 + 0.5 * np.cos(z[0] - THETA0[0]) * np.cos(z[1] - THETA0[1])
    r = 0.5 + 0.4 * np.cos(z[0] + z[1])
    return float(s), float(r)


class TestBounds:
    def test_lcb_against_dense_solve(self):
        rng = np.random.default_rng(0)
        X = np.column_stack([rng.uniform(-1, 1, (6, 2)), rng.uniform(0, 1, 6)])
        s, r = rng.uniform(0, 1, 6), rng.uniform(0, 1, 6)
        model = model_with(X, s, r)
        theta, times, T = np.array([0.2, -0.1]), np.array([0.0, 4.0, 12.0, 20.0]), 12.0
        K = matern52(pairwise(X, X))
        vals = []
        for t in times[times <= T]:
            q = np.array([*theta, t / 20.0])
            mean, var = dense_reference_solve(K, 1.0, s, matern52(pairwise(X, q))[:, 0], 1.0)
            vals.append(mean - 2.0 * math.sqrt(var))
        assert lcb_safety(model, theta, T, 2.0, times) == pytest.approx(min(vals), abs=1e-10)
        q = np.array([*theta, T / 20.0])
        mean, var = dense_reference_solve(K, 1.0, r, matern52(pairwise(X, q))[:, 0], 1.0)
        assert lcb_reset(model, theta, T, 1.5) == pytest.approx(mean - 1.5 * math.sqrt(var),
                                                                abs=1e-10)

    def test_no_time_in_window(self):
        with pytest.raises(ConfigurationError):
            lcb_safety(model_with([], [], []), (0.0, 0.0), 1.0, 2.0, [2.0, 3.0])

    def test_prior_bounds(self):
        m = model_with([], [], [])
        assert lcb_safety(m, (0.0, 0.0), 20.0, 2.0, [0.0, 20.0]) == pytest.approx(-2.0)
        assert lcb_reset(m, (0.0, 0.0), 20.0, 1.0) == pytest.approx(-1.0)


class TestFeasibility:
    def test_gamma0_always_feasible(self):
        grid = small_grid()
        m = model_with([], [], [])
        thr = Thresholds(0.1, 0.1)
        for p in grid.gamma0:
            assert is_feasible(m, p, thr, grid.gamma0)
        other = ControlPoint((0.0, 0.0), 0.0, 20.0)
        assert not is_feasible(m, other, thr, grid.gamma0)

    def test_unconstrained_everything(self):
        m = model_with([], [], [])
        assert is_feasible(m, ControlPoint((3.0, 3.0), 1.0, 20.0), Thresholds(math.inf, math.inf))

    def test_confident_model_certifies(self):
        # many perfect observations near theta -> LCB close to one
        X = np.array([[0.0, 0.0, t] for t in np.linspace(0, 1, 5)] * 40)
        m = model_with(X, np.ones(len(X)), np.ones(len(X)), ell=5.0)
        p = ControlPoint((0.0, 0.0), 10.0, 20.0)
        assert is_feasible(m, p, Thresholds(0.3, 0.3), times=[0.0, 10.0, 20.0])
        assert not is_feasible(m, p, Thresholds(0.01, 0.01), times=[0.0, 10.0, 20.0])

    def test_map_matches_pointwise(self):
        rng = np.random.default_rng(1)
        grid = small_grid()
        X = np.column_stack([rng.uniform(-1.5, 0, (30, 2)), rng.uniform(0, 1, 30)])
        m = model_with(X, rng.uniform(0.7, 1, 30), rng.uniform(0.7, 1, 30), ell=3.0)
        thr = Thresholds(0.5, 0.5, 1.0, 1.0)
        fmap = feasibility_map(m, grid, thr)
        mask = fmap.candidates(grid)
        for i in range(grid.size):
            p = grid.point(i)
            assert mask[i] == is_feasible(m, p, thr, grid.gamma0, grid.times), i

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(2)
        grid = small_grid()
        X = np.column_stack([rng.uniform(-2, 1, (40, 2)), rng.uniform(0, 1, 40)])
        m = model_with(X, rng.uniform(0.6, 1, 40), rng.uniform(0.6, 1, 40), ell=3.0)
        loose = set(certify_set(m, grid, Thresholds(0.5, 0.5, 1.0, 1.0)))
        tight = set(certify_set(m, grid, Thresholds(0.1, 0.1, 1.0, 1.0)))
        assert tight <= loose


class TestCertify:
    def test_empty_model_is_gamma0(self):
        grid = small_grid()
        cert = certify_set(model_with([], [], []), grid, Thresholds(0.1, 0.1))
        assert cert == list(grid.gamma0)

    def test_unconstrained_is_whole_grid(self):
        grid = small_grid()
        cert = certify_set(model_with([], [], []), grid, Thresholds(math.inf, math.inf))
        assert len(cert) == grid.size
        assert cert == [grid.point(i) for i in range(grid.size)]


class TestGrid:
    def test_scan_order(self):
        grid = small_grid()
        assert grid.point(7 * 5 * 0 + 3) == ControlPoint(grid.thetas[0], 15.0, 20.0)
        assert grid.point(5 * 2 + 1).theta == tuple(grid.thetas[2])

    def test_gamma0_on_lattice(self):
        grid = small_grid()
        assert len(grid.gamma0_theta) == 1
        assert_allclose(grid.thetas[grid.gamma0_theta[0]], THETA0)

    def test_off_lattice_gamma0_rejected(self):
        with pytest.raises(ConfigurationError):
            CandidateGrid.lattice(-math.pi, math.pi, 7, 2, np.array([0.0, 20.0]), 20.0, (0.1, 0.2))

    def test_empty_gamma0_rejected(self):
        with pytest.raises(ConfigurationError):
            CandidateGrid(np.zeros((1, 2)), [0.0], 1.0, ())

    def test_benchmark_lattice(self):
        grid = CandidateGrid.from_config(parse_config(""))
        assert grid.n_theta == 1600 and grid.n_times == 50
        assert grid.times[0] == 0.0 and grid.times[-1] == pytest.approx(20.0)
        assert_allclose(grid.thetas[grid.gamma0_theta[0]], THETA0, atol=1e-12)


def enumerate_first(grid, inputs, feasible, sigma, anchors, excluded, chosen, radius, eta,
                    growth):
    """Loop-based region growing used as an oracle for ``mode="first"``."""
    cover = max(min(math.dist(inputs[i], inputs[a]) for a in anchors) for i in range(grid.size))
    excluded = set(excluded)
    while True:
        for i in range(grid.size):
            if not feasible[i] or i in excluded:
                continue
            if min(math.dist(inputs[i], inputs[a]) for a in anchors) > radius * (1 + 1e-12):
                continue
            if sigma[i] > eta:
                return i, excluded, radius
            if i not in chosen:
                excluded.add(i)
        if radius >= cover:
            return None, excluded, radius
        radius *= growth


class TestSelection:
    def drive(self, grid, model, eta, thr, steps, mode="first", oracle=True):
        inputs = grid.embed(model)
        state = ExplorerState.initial(grid, inputs, grid.cell_diagonal(model.time_scale))
        history = []
        for _ in range(steps):
            fmap = feasibility_map(model, grid, thr, inputs)
            expect = None
            if oracle:
                expect = enumerate_first(grid, inputs, fmap.candidates(grid), fmap.sigma,
                                         list(state.anchors), set(np.flatnonzero(state.excluded)),
                                         state.chosen, state.radius, eta, 2.0)
            before = (state.excluded.copy(), state.radius, len(state.anchors))
            point, state, _ = select_next(model, grid, state, eta, thr, inputs, mode, 2.0, fmap)
            idx = state.selected[-1][0] if point is not None else None
            if oracle:
                assert idx == expect[0]
                assert set(np.flatnonzero(state.excluded)) == expect[1]
                assert state.radius == pytest.approx(expect[2])
            history.append((before, idx))
            if point is None:
                break
            s, r = synthetic_targets(point.theta)
            model.add(inputs[idx], s, r)
        return state, history

    def test_first_matches_enumeration(self):
        grid = small_grid()
        model = model_with([], [], [], ell=2.0)
        self.drive(grid, model, 0.4, Thresholds(0.5, 0.5, 1.0, 1.0), 25)

    def test_first_matches_enumeration_unconstrained(self):
        grid = CandidateGrid.lattice(-math.pi, math.pi, 7, 2, np.array([0.0, 10.0, 20.0]), 20.0,
                                     THETA0)
        model = model_with([], [], [])
        self.drive(grid, model, 0.5, Thresholds(math.inf, math.inf), 40)

    def test_monotone_bookkeeping(self):
        grid = small_grid()
        model = model_with([], [], [], ell=2.0)
        state, hist = self.drive(grid, model, 0.3, Thresholds(0.6, 0.6, 1.0, 1.0), 40,
                                 oracle=False)
        radii = [h[0][1] for h in hist] + [state.radius]
        assert all(b >= a for a, b in zip(radii, radii[1:]))
        for (exc_before, _, n_anchor), (exc_after, _, _) in zip(
                [h[0] for h in hist], [h[0] for h in hist[1:]] + [(state.excluded, 0, 0)]):
            assert np.all(exc_after >= exc_before)
        # a dismissed candidate is never selected later
        dismissed_at = {}
        for k, (before, idx) in enumerate(hist):
            for i in np.flatnonzero(before[0]):
                dismissed_at.setdefault(int(i), k)
            if idx is not None:
                assert idx not in dismissed_at or idx in {h[1] for h in hist[:dismissed_at[idx]]}
        assert len(state.anchors) == len(grid.gamma0_index) + len(state.selected)

    def test_selected_are_feasible_and_uncertain(self):
        grid = small_grid()
        model = model_with([], [], [], ell=2.0)
        thr = Thresholds(0.4, 0.4, 1.0, 1.0)
        inputs = grid.embed(model)
        state = ExplorerState.initial(grid, inputs, grid.cell_diagonal(20.0))
        for _ in range(20):
            point, state, fmap = select_next(model, grid, state, 0.2, thr, inputs)
            if point is None:
                break
            assert is_feasible(model, point, thr, grid.gamma0, grid.times)
            assert state.selected[-1][1] > 0.2
            model.add(inputs[state.selected[-1][0]], *synthetic_targets(point.theta))

    def test_argmax_picks_largest_sigma(self):
        grid = small_grid()
        model = model_with([[0.0, 0.0, 0.5]], [0.9], [0.9])
        thr = Thresholds(math.inf, math.inf)
        inputs = grid.embed(model)
        state = ExplorerState.initial(grid, inputs, 1.0)
        point, state, fmap = select_next(model, grid, state, 0.1, thr, inputs, mode="argmax")
        assert state.selected[-1][1] == pytest.approx(fmap.sigma.max())

    def test_unknown_mode(self):
        grid = small_grid()
        model = model_with([], [], [])
        inputs = grid.embed(model)
        with pytest.raises(ConfigurationError):
            select_next(model, grid, ExplorerState.initial(grid, inputs, 1.0), 0.1,
                        Thresholds(0.1, 0.1), inputs, mode="random")


class TestExplore:
    def test_zero_iterations(self):
        rep = explore(tiny_config(iters=0))
        assert rep.rows == [] and rep.error is None
        assert rep.certified == list(rep.grid.gamma0)

    @pytest.mark.parametrize("mode", ["first", "argmax"])
    def test_eta_at_prior_std_halts_immediately(self, mode):
        rep = explore(tiny_config(eta=1.0, mode=mode))
        assert rep.n_selected == 0 and rep.state.reason == "stopping rule"

    def test_constructive_safety_and_logs(self):
        rep = explore(tiny_config(iters=6))
        assert rep.error is None and rep.n_selected == 6
        assert all(row["feasible"] for row in rep.rows)
        gains = rep.info_gain
        assert np.all(np.diff(gains) >= 0) and gains[0] > 0
        assert all(0 <= row["s_obs"] <= 1 and 0 <= row["r_obs"] <= 1 for row in rep.rows)
        for p in rep.certified:
            assert is_feasible(rep.model, p, rep.thresholds, rep.grid.gamma0, rep.grid.times)

    def test_stopping_soundness(self):
        # a large eta ends the run through the stopping rule
        rep = explore(tiny_config(iters=200, eps="inf", eta=0.7))
        assert rep.state.reason == "stopping rule"
        fmap = feasibility_map(rep.model, rep.grid, rep.thresholds)
        assert fmap.sigma[fmap.candidates(rep.grid)].max() < 0.7

    def test_reproducible(self):
        a = explore(tiny_config(iters=3))
        b = explore(tiny_config(iters=3))
        assert [r["index"] for r in a.rows] == [r["index"] for r in b.rows]
        assert [r["s_obs"] for r in a.rows] == [r["s_obs"] for r in b.rows]

    def test_error_gives_partial_report(self, monkeypatch):
        import safelearn.explorer as ex
        calls = {"n": 0}
        real = ex.integrate_paths

        def flaky(*a, **k):
            calls["n"] += 1
            if calls["n"] == 3:
                raise FloatingPointError("boom")
            return real(*a, **k)

        monkeypatch.setattr(ex, "integrate_paths", flaky)
        rep = explore(tiny_config(iters=5))
        assert rep.n_selected == 2 and "boom" in rep.error and rep.state.reason == "error"

    def test_iteration_seed(self):
        assert iteration_seed(0, 1) == iteration_seed(0, 1)
        assert len({iteration_seed(0, i) for i in range(100)}) == 100
