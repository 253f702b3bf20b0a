"""Safe exploration loop over a finite lattice of ``(theta, t, T)`` candidates.

Candidates are the product of a control lattice and a set of observation
times, all sharing the horizon ``T``.  Feasibility is decided per control
from lower confidence bounds of the safety and reset regressors; the next
point is chosen by region growing around the points already visited.
"""
from __future__ import annotations

import math
import time
import traceback
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .density import (ConfigurationError, KdeEstimate, ObservationRecord,
                      probability_from_density, probability_from_samples)
from .kernels import KernelModel, add_point, confidence_params
from .sde import ControlPoint, TrajectoryBatch, integrate_paths

__all__ = [
    "Thresholds",
    "CandidateGrid",
    "ExplorerState",
    "CampaignReport",
    "lcb_safety",
    "lcb_reset",
    "is_feasible",
    "feasibility_map",
    "select_next",
    "certify_set",
    "observe",
    "explore",
    "iteration_seed",
]


@dataclass(frozen=True)
class Thresholds:
    """Safety/reset tolerances and the confidence multipliers used with them."""

    epsilon: float
    xi: float
    beta_s: float = 2.0
    beta_r: float = 2.0

    @property
    def unconstrained(self) -> bool:
        return math.isinf(self.epsilon) and math.isinf(self.xi)


@dataclass
class CandidateGrid:
    """Control lattice ``thetas`` (``(L, m)``) times observation ``times`` (``(J,)``).

    Candidate ``l * J + j`` is ``(thetas[l], times[j], horizon)``; this is
    also the scan order used by :func:`select_next`.  ``gamma0`` lists the
    candidates known to be safe and resettable beforehand; each must lie on
    the lattice.
    """

    thetas: np.ndarray
    times: np.ndarray
    horizon: float
    gamma0: tuple

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.horizon = float(self.horizon)
        self.gamma0 = tuple(self.gamma0)
        if len(self.gamma0) == 0:
            raise ConfigurationError("the initial safe-resettable set must not be empty")
        if len(self.times) == 0 or self.times.min() < 0 or self.times.max() > self.horizon + 1e-9:
            raise ConfigurationError("observation times must lie in [0, horizon]")
        idx = []
        for p in self.gamma0:
            l = int(np.argmin(np.abs(self.thetas - np.asarray(p.theta)).max(axis=1)))
            j = int(np.argmin(np.abs(self.times - p.t)))
            if (np.abs(self.thetas[l] - p.theta).max() > 1e-9 or abs(self.times[j] - p.t) > 1e-9
                    or abs(p.T - self.horizon) > 1e-9):
                raise ConfigurationError(f"initial point {p} is not a lattice candidate")
            idx.append(l * len(self.times) + j)
        self.gamma0_index = np.unique(idx)
        self.gamma0_theta = np.unique(self.gamma0_index // len(self.times))

    @property
    def n_theta(self) -> int:
        return len(self.thetas)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def size(self) -> int:
        return self.n_theta * self.n_times

    def point(self, index: int) -> ControlPoint:
        l, j = divmod(int(index), self.n_times)
        return ControlPoint(self.thetas[l], self.times[j], self.horizon)

    def theta_of(self, index):
        return np.asarray(index) // self.n_times

    def embed(self, model: KernelModel) -> np.ndarray:
        """Kernel inputs of every candidate in scan order, ``(L * J, m + 1)``."""
        theta = np.repeat(self.thetas, self.n_times, axis=0)
        t = np.tile(self.times, self.n_theta)
        return model.embed(theta, t)

    def cell_diagonal(self, time_scale: float) -> float:
        """Length of one lattice cell diagonal in the kernel metric."""
        steps = []
        for col in self.thetas.T:
            u = np.unique(col)
            steps.append(np.min(np.diff(u)) if len(u) > 1 else 0.0)
        dt = np.min(np.diff(self.times)) if self.n_times > 1 else 0.0
        return float(math.sqrt(sum(s * s for s in steps) + (dt / time_scale) ** 2)) or 1.0

    @classmethod
    def lattice(cls, low, high, resolution, m, times, horizon, initial_theta):
        axis = np.linspace(low, high, resolution)
        mesh = np.meshgrid(*([axis] * m), indexing="ij")
        thetas = np.column_stack([g.ravel() for g in mesh])
        # snap the initial control onto the lattice when it matches to roundoff
        init = np.asarray(initial_theta, dtype=float)
        snapped = np.array([axis[np.argmin(np.abs(axis - v))] for v in init])
        if np.abs(snapped - init).max() < 1e-9:
            init = snapped
        gamma0 = tuple(ControlPoint(init, t, horizon) for t in times)
        return cls(thetas, times, horizon, gamma0)

    @classmethod
    def from_config(cls, config) -> "CandidateGrid":
        lr, ctl = config.learning, config.control
        t_max = config.system.t_max
        nodes = np.unique(np.round(np.linspace(0, ctl.n_steps, lr.time_resolution)).astype(int))
        times = nodes * (t_max / ctl.n_steps)
        return cls.lattice(lr.theta_low, lr.theta_high, lr.theta_resolution, ctl.n_directions,
                           times, t_max, lr.initial_theta)


@dataclass
class ExplorerState:
    """Bookkeeping of the region-growing sampler.

    ``anchors`` are the candidate indices of the visited set (initially the
    initial safe set); ``excluded`` marks candidates dismissed for low
    uncertainty; ``min_dist`` caches each candidate's distance to the
    anchors.
    """

    excluded: np.ndarray
    min_dist: np.ndarray
    radius: float
    anchors: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    iteration: int = 0
    stopped: bool = False
    reason: str = ""
    expansions: int = 0

    @classmethod
    def initial(cls, grid: CandidateGrid, inputs: np.ndarray, radius: float) -> "ExplorerState":
        anchors = list(int(i) for i in grid.gamma0_index)
        dist = cdist(inputs, inputs[anchors]).min(axis=1)
        return cls(excluded=np.zeros(grid.size, dtype=bool), min_dist=dist, radius=float(radius),
                   anchors=anchors)

    @property
    def chosen(self) -> set:
        return {idx for idx, *_ in self.selected}


# -- confidence bounds ----------------------------------------------------
def _times_up_to(times, T):
    times = np.asarray(times, dtype=float).reshape(-1)
    sel = times[times <= T + 1e-12]
    if sel.size == 0:
        raise ConfigurationError(f"no observation time in [0, {T}]")
    return sel


def lcb_safety(model: KernelModel, theta, T: float, beta_s: float, times) -> float:
    """``min_{t_j <= T} s_hat(theta, t_j) - beta_s sigma(theta, t_j)`` over the time grid."""
    ts = _times_up_to(times, T)
    z = model.embed(np.repeat(np.atleast_2d(theta), len(ts), axis=0), ts)
    s, _, sig = model.predict_all(z)
    return float(np.min(s - beta_s * sig))


def lcb_reset(model: KernelModel, theta, T: float, beta_r: float) -> float:
    """``r_hat(theta, T) - beta_r sigma(theta, T)``."""
    z = model.embed(np.atleast_2d(theta), T)
    _, r, sig = model.predict_all(z)
    return float(r[0] - beta_r * sig[0])


def _in_gamma0(candidate: ControlPoint, gamma0) -> bool:
    for p in gamma0:
        if (abs(p.t - candidate.t) <= 1e-9 and abs(p.T - candidate.T) <= 1e-9
                and np.allclose(p.theta, candidate.theta, rtol=0, atol=1e-9)):
            return True
    return False


def is_feasible(model: KernelModel, candidate: ControlPoint, thresholds: Thresholds,
                gamma0=(), times=None) -> bool:
    """Membership of ``candidate`` in the safe-resettable set.

    True for members of ``gamma0``; otherwise requires ``t <= T`` and both
    lower confidence bounds above ``1 - epsilon`` and ``1 - xi``.  The
    infimum over ``[0, T]`` runs over ``times`` (default: ``t`` and ``T``).
    """
    if _in_gamma0(candidate, gamma0):
        return True
    if candidate.t > candidate.T:
        return False
    if thresholds.unconstrained:
        return True
    times = np.array([candidate.t, candidate.T]) if times is None else times
    if not math.isinf(thresholds.epsilon):
        if lcb_safety(model, candidate.theta, candidate.T, thresholds.beta_s, times) < \
                1.0 - thresholds.epsilon:
            return False
    if not math.isinf(thresholds.xi):
        if lcb_reset(model, candidate.theta, candidate.T, thresholds.beta_r) < 1.0 - thresholds.xi:
            return False
    return True


@dataclass
class FeasibilityMap:
    """Per-control feasibility with the bounds that decided it."""

    feasible_theta: np.ndarray
    lcb_s: np.ndarray
    lcb_r: np.ndarray
    s_hat: np.ndarray
    r_hat: np.ndarray
    sigma: np.ndarray

    def candidates(self, grid: CandidateGrid) -> np.ndarray:
        """Boolean mask over all candidates in scan order."""
        mask = np.repeat(self.feasible_theta, grid.n_times)
        mask[grid.gamma0_index] = True
        return mask


def feasibility_map(model: KernelModel, grid: CandidateGrid, thresholds: Thresholds,
                    inputs: Optional[np.ndarray] = None, preds=None) -> FeasibilityMap:
    """Vectorized :func:`is_feasible` over the whole lattice.

    ``inputs`` are the embedded candidates and ``preds`` an optional cached
    ``(s_hat, r_hat, sigma)`` triple for them.
    """
    if preds is None:
        inputs = grid.embed(model) if inputs is None else inputs
        preds = model.predict_all(inputs)
    s, r, sig = (np.asarray(a).reshape(grid.n_theta, grid.n_times) for a in preds)
    upto = grid.times <= grid.horizon + 1e-12
    lcb_s = np.min((s - thresholds.beta_s * sig)[:, upto], axis=1)
    last = int(np.argmin(np.abs(grid.times - grid.horizon)))
    if abs(grid.times[last] - grid.horizon) <= 1e-9:
        lcb_r = r[:, last] - thresholds.beta_r * sig[:, last]
    else:
        z = model.embed(grid.thetas, grid.horizon)
        _, r_T, sig_T = model.predict_all(z)
        lcb_r = r_T - thresholds.beta_r * sig_T
    if thresholds.unconstrained:
        ok = np.ones(grid.n_theta, dtype=bool)
    else:
        ok = np.ones(grid.n_theta, dtype=bool)
        if not math.isinf(thresholds.epsilon):
            ok &= lcb_s >= 1.0 - thresholds.epsilon
        if not math.isinf(thresholds.xi):
            ok &= lcb_r >= 1.0 - thresholds.xi
    return FeasibilityMap(ok, lcb_s, lcb_r, s.ravel(), r.ravel(), sig.ravel())


def certify_set(model: KernelModel, grid: CandidateGrid, thresholds: Thresholds) -> list:
    """All lattice candidates in the safe-resettable set, in scan order."""
    fmap = feasibility_map(model, grid, thresholds)
    return [grid.point(i) for i in np.flatnonzero(fmap.candidates(grid))]


# -- selection --------------------------------------------------------------
def _add_anchor(state: ExplorerState, inputs: np.ndarray, index: int):
    state.anchors.append(int(index))
    d = np.linalg.norm(inputs - inputs[index], axis=1)
    np.minimum(state.min_dist, d, out=state.min_dist)


def _select_argmax(fmap, grid, state, eta, inputs):
    mask = fmap.candidates(grid)
    sig = np.where(mask, fmap.sigma, -np.inf)
    best = int(np.argmax(sig))
    if not sig[best] > eta:
        state.stopped, state.reason = True, "stopping rule"
        return None
    return best


def _select_region_growing(fmap, grid, state, eta, inputs, growth):
    feasible = fmap.candidates(grid)
    chosen = np.zeros(grid.size, dtype=bool)
    chosen[list(state.chosen)] = True
    cover = float(state.min_dist.max())
    while True:
        mask = feasible & (state.min_dist <= state.radius * (1 + 1e-12)) & ~state.excluded
        order = np.flatnonzero(mask)
        hits = fmap.sigma[order] > eta
        if hits.any():
            first = int(np.argmax(hits))
            low = order[:first]
            state.excluded[low[~chosen[low]]] = True
            return int(order[first])
        state.excluded[order[~chosen[order]]] = True
        if state.radius >= cover:
            state.stopped, state.reason = True, "stopping rule"
            return None
        state.radius *= growth
        state.expansions += 1


def select_next(model: KernelModel, grid: CandidateGrid, state: ExplorerState, eta: float,
                thresholds: Thresholds, inputs: Optional[np.ndarray] = None,
                mode: str = "first", growth: float = 2.0, fmap: Optional[FeasibilityMap] = None):
    """Pick the next candidate with ``sigma > eta`` inside the feasible set.

    ``mode="first"`` scans the feasible candidates within ``state.radius``
    of the visited set (excluding dismissed ones) and takes the first whose
    uncertainty exceeds ``eta``; candidates passed over go to
    ``state.excluded``.  When the neighbourhood is exhausted the radius is
    multiplied by ``growth``.  ``mode="argmax"`` takes the most uncertain
    feasible candidate instead.  Returns ``(ControlPoint or None, state,
    fmap)``; ``None`` sets ``state.stopped``.
    """
    inputs = grid.embed(model) if inputs is None else inputs
    if fmap is None:
        fmap = feasibility_map(model, grid, thresholds, inputs)
    if mode == "first":
        index = _select_region_growing(fmap, grid, state, eta, inputs, growth)
    elif mode == "argmax":
        index = _select_argmax(fmap, grid, state, eta, inputs)
    else:
        raise ConfigurationError(f"unknown selection mode {mode!r}")
    if index is None:
        return None, state, fmap
    _add_anchor(state, inputs, index)
    state.selected.append((index, float(fmap.sigma[index])))
    return grid.point(index), state, fmap


# -- the loop -----------------------------------------------------------------
def iteration_seed(seed: int, iteration: int) -> int:
    """Seed of the trajectory batch simulated at ``iteration``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(iteration),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def observe(batch: TrajectoryBatch, t: float, regions, bandwidth: float,
            estimator: str = "samples", mc_points: int = 10000, seed: int = 0) -> ObservationRecord:
    """Training datum at time ``t`` of a simulated batch."""
    idx = batch.node_index(t)
    pos = batch.states[:, idx, : batch.position_dim]
    kde = KdeEstimate(pos, bandwidth)
    if estimator == "samples":
        s_hat = probability_from_samples(batch, batch.time_grid[idx], regions.safe_indicator)
        r_hat = probability_from_samples(batch, batch.time_grid[idx], regions.reset_indicator)
    else:
        s_hat = probability_from_density(kde, regions.safe_indicator, mc_points, seed)
        r_hat = probability_from_density(kde, regions.reset_indicator, mc_points, seed + 1)
    point = ControlPoint(np.zeros(1), batch.time_grid[idx], batch.time_grid[-1])
    return ObservationRecord(point=point, kde=kde, s_hat=s_hat, r_hat=r_hat)


@dataclass
class CampaignReport:
    """Outcome of :func:`explore`.

    ``rows`` holds one dict per iteration with the selected candidate, its
    uncertainty and predictions at selection time, the observed targets and
    the cumulative information gain.
    """

    config: object
    grid: CandidateGrid
    model: KernelModel
    state: ExplorerState
    rows: list
    certified: list
    thresholds: Thresholds
    wall_time: float
    error: Optional[str] = None

    @property
    def info_gain(self) -> np.ndarray:
        return np.array([row["info_gain"] for row in self.rows])

    @property
    def n_selected(self) -> int:
        return len(self.rows)


def explore(config, progress=None) -> CampaignReport:
    """Run the safe exploration campaign described by ``config``.

    Each iteration selects a candidate, simulates ``q_paths`` trajectories
    of its control up to the horizon, records the safety and reset
    frequencies and the KDE at the observation time, and adds them to the
    model.  The loop ends on the stopping rule, on ``max_iterations`` or on
    an error, in which case the partial report carries ``error``.
    """
    start = time.perf_counter()
    lr = config.learning
    system = config.build_system()
    regions = config.build_regions()
    grid = CandidateGrid.from_config(config)
    model = config.build_model()
    inputs = grid.embed(model)
    state = ExplorerState.initial(grid, inputs, grid.cell_diagonal(model.time_scale))
    bandwidth = config.kde_bandwidth()
    rows = []
    thresholds = Thresholds(lr.epsilon, lr.xi)
    error = None
    try:
        for it in range(lr.max_iterations):
            beta = confidence_params(model, lr)
            thresholds = Thresholds(lr.epsilon, lr.xi, beta.beta_s, beta.beta_r)
            fmap = feasibility_map(model, grid, thresholds, inputs)
            point, state, fmap = select_next(model, grid, state, lr.eta, thresholds, inputs,
                                             lr.selection_mode, lr.radius_growth, fmap)
            if point is None:
                break
            index = state.selected[-1][0]
            seed = iteration_seed(config.seeds.explore, it)
            batch = integrate_paths(system, config.build_control(point.theta), lr.q_paths,
                                    config.control.n_steps, seed, horizon=point.T)
            obs = observe(batch, point.t, regions, bandwidth, lr.probability_estimator,
                          lr.q_prime, seed)
            add_point(model, point, obs)
            state.iteration = it + 1
            l = int(grid.theta_of(index))
            rows.append({
                "iteration": it,
                "index": index,
                "theta": point.theta,
                "t": point.t,
                "T": point.T,
                "sigma": float(fmap.sigma[index]),
                "s_pred": float(fmap.s_hat[index]),
                "r_pred": float(fmap.r_hat[index]),
                "lcb_s": float(fmap.lcb_s[l]),
                "lcb_r": float(fmap.lcb_r[l]),
                "feasible": bool(fmap.candidates(grid)[index]),
                "in_gamma0": bool(index in set(grid.gamma0_index.tolist())),
                "s_obs": obs.s_hat,
                "r_obs": obs.r_hat,
                "radius": state.radius,
                "info_gain": model.information_gain(),
            })
            if progress is not None:
                progress(rows[-1])
        else:
            if not state.stopped:
                state.reason = "max_iterations"
    except Exception as exc:  # partial report; the caller decides how to surface it
        error = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
        state.reason = "error"
    beta = confidence_params(model, lr)
    thresholds = Thresholds(lr.epsilon, lr.xi, beta.beta_s, beta.beta_r)
    certified = certify_set(model, grid, thresholds) if error is None else []
    return CampaignReport(config, grid, model, state, rows, certified, thresholds,
                          time.perf_counter() - start, error)
