"""Controlled SDEs, Euler-Maruyama path integration and the 2D benchmark.

All drift/diffusion callables are batched: they receive the stacked state of
``P`` paths with shape ``(P, D)`` and the control values with shape
``(P, d)``.  ``D`` is the full state dimension (position only, or position
followed by velocity for second-order systems).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "IntegrationError",
    "ControlPoint",
    "SystemSpec",
    "RegionSpec",
    "BenchmarkControl",
    "TrajectoryBatch",
    "path_streams",
    "integrate_paths",
    "simulate",
    "simulate_normals",
    "draws_per_path",
    "eval_control",
    "reset",
    "benchmark_system",
    "benchmark_regions",
    "benchmark_control",
    "noise_amplitude",
]


class IntegrationError(RuntimeError):
    """A sample path produced a non-finite state."""


@dataclass(frozen=True)
class ControlPoint:
    """A control parameter ``theta``, an observation time ``t`` and a horizon ``T``."""

    theta: tuple
    t: float
    T: float

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(v) for v in np.atleast_1d(self.theta)))
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "T", float(self.T))
        if not 0.0 <= self.t <= self.T + 1e-12:
            raise ValueError(f"need 0 <= t <= T, got t={self.t}, T={self.T}")


@dataclass(frozen=True)
class SystemSpec:
    """A controlled SDE ``dX = b(X, u) dt + a(X, u) dW``.

    Parameters
    ----------
    state_dim : int
        Position dimension ``n``.  Densities and region indicators act on
        the first ``n`` state coordinates.
    control_param_dim : int
        Dimension ``m`` of the control parameter ``theta``.
    drift : callable
        ``drift(state, u) -> (P, D)``.
    diffusion : callable
        ``diffusion(state, u) -> (P, D, k)``, or ``(P, D)`` for a diagonal
        diffusion (then ``k == D``).
    initial_mean, initial_std : array, float
        Initial position law ``N(initial_mean, initial_std**2 I)``.
    t_max : float
        Time horizon.
    second_order : bool
        If true the full state is ``(position, velocity)`` and the velocity
        starts at zero.
    noise_dim : int, optional
        Number of driving Brownian motions ``k``; defaults to ``D``.
    """

    state_dim: int
    control_param_dim: int
    drift: Callable
    diffusion: Callable
    initial_mean: np.ndarray
    initial_std: float
    t_max: float
    second_order: bool = False
    noise_dim: Optional[int] = None

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.initial_std < 0:
            raise ValueError("initial_std must be nonnegative")
        mean = np.asarray(self.initial_mean, dtype=float).reshape(-1)
        if mean.shape != (self.state_dim,):
            raise ValueError(f"initial_mean must have shape ({self.state_dim},)")
        object.__setattr__(self, "initial_mean", mean)
        if self.noise_dim is None:
            object.__setattr__(self, "noise_dim", self.full_dim)

    @property
    def full_dim(self) -> int:
        return self.state_dim * (2 if self.second_order else 1)


@dataclass(frozen=True)
class RegionSpec:
    """Safe region ``{g >= 0}`` and reset region ``{h >= 0}`` on positions."""

    safe_indicator: Callable
    reset_indicator: Callable


@dataclass(frozen=True)
class BenchmarkControl:
    """Two-phase control of the double-integrator benchmark.

    ``directions`` has shape ``(m,)`` for a single control or ``(P, m)`` to
    give every path its own parameter (used by the Monte-Carlo oracles).
    """

    directions: np.ndarray
    speed: float = 2.0
    damping: float = 0.5
    t_explo: float = 6.0
    target: np.ndarray = field(default_factory=lambda: np.zeros(2))
    u_max: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "directions", np.asarray(self.directions, dtype=float))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))
        if self.speed <= 0 or self.damping <= 0 or self.t_explo <= 0:
            raise ValueError("speed, damping and t_explo must be positive")
        if self.u_max is None:
            object.__setattr__(self, "u_max", 2.0 * self.speed)

    @property
    def m(self) -> int:
        return self.directions.shape[-1]

    def __call__(self, t, state):
        n = state.shape[1] // 2
        return eval_control(self, t, state[:, :n], state[:, n:])


def eval_control(control: BenchmarkControl, t: float, x, v_state):
    """Acceleration commanded by the benchmark control at time ``t``.

    During exploration (``t <= t_explo``) direction ``i = min(floor(t m /
    t_explo), m - 1)`` is followed at speed ``v`` with velocity damping; after
    that a feedback law steers back to ``target``.  The result is clipped
    componentwise to ``[-u_max, u_max]``.
    """
    x = np.asarray(x, dtype=float)
    vel = np.asarray(v_state, dtype=float)
    if t <= control.t_explo:
        i = min(int(np.floor(t * control.m / control.t_explo)), control.m - 1)
        ang = control.directions[..., i]
        heading = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        u = control.speed * heading - vel
    else:
        diff = control.target - x
        dist = np.linalg.norm(diff, axis=-1, keepdims=True)
        safe = np.where(dist > 0, dist, 1.0)
        u = np.where(dist > 0, control.speed * diff / safe - vel, -vel)
        u = control.damping * u
    return np.clip(u, -control.u_max, control.u_max)


@dataclass(frozen=True)
class TrajectoryBatch:
    """``Q`` sample paths on a shared uniform time grid."""

    time_grid: np.ndarray
    states: np.ndarray
    seed: int
    position_dim: int
    control: object = None

    @property
    def q(self) -> int:
        return self.states.shape[0]

    def node_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.time_grid - t)))

    def positions_at(self, t: float) -> np.ndarray:
        return self.states[:, self.node_index(t), : self.position_dim]


def path_streams(seed: int, keys: Sequence[tuple], size: int) -> np.ndarray:
    """Standard normals for each path, drawn from a child stream of ``seed``.

    Path ``keys[j]`` always receives the same numbers regardless of which
    other paths are simulated alongside it.
    """
    out = np.empty((len(keys), size))
    for j, key in enumerate(keys):
        ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
        out[j] = np.random.Generator(np.random.PCG64(ss)).standard_normal(size)
    return out


def _initial_states(spec: SystemSpec, normals: np.ndarray) -> np.ndarray:
    x0 = spec.initial_mean + spec.initial_std * normals[:, : spec.state_dim]
    if spec.second_order:
        x0 = np.concatenate([x0, np.zeros_like(x0)], axis=1)
    return x0


def _euler_maruyama(spec, control, x0, increments, dt, keys=None):
    """Integrate ``P`` paths; ``increments`` has shape ``(P, n_steps, k)``."""
    n_paths, n_steps, _ = increments.shape
    states = np.empty((n_paths, n_steps + 1, spec.full_dim))
    states[:, 0] = x0
    x = x0
    sqdt = np.sqrt(dt)
    no_control = np.zeros((n_paths, 0))
    for step in range(n_steps):
        t = step * dt
        u = no_control if control is None else control(t, x)
        b = spec.drift(x, u)
        a = spec.diffusion(x, u)
        dw = increments[:, step]
        if a.ndim == 2:
            noise = a * dw
        else:
            noise = np.einsum("pij,pj->pi", a, dw)
        x = x + b * dt + sqdt * noise
        if not np.isfinite(x).all():
            bad = int(np.flatnonzero(~np.isfinite(x).all(axis=1))[0])
            label = keys[bad] if keys is not None else bad
            raise IntegrationError(f"non-finite state on path {label} at step {step + 1}")
        states[:, step + 1] = x
    return states


def draws_per_path(spec: SystemSpec, n_steps: int) -> int:
    """Number of standard normals consumed by one path."""
    return spec.state_dim + n_steps * spec.noise_dim


def simulate_normals(spec, control, normals, n_steps, horizon=None, keys=None):
    """Integrate paths driven by given standard normals ``(P, draws_per_path)``."""
    horizon = spec.t_max if horizon is None else float(horizon)
    dt = horizon / n_steps
    x0 = _initial_states(spec, normals)
    increments = normals[:, spec.state_dim:].reshape(len(normals), n_steps, spec.noise_dim)
    states = _euler_maruyama(spec, control, x0, increments, dt, keys)
    return np.arange(n_steps + 1) * dt, states


def simulate(spec, control, keys, seed, n_steps, horizon=None):
    """Simulate the paths named by ``keys`` and return ``(time_grid, states)``."""
    normals = path_streams(seed, keys, draws_per_path(spec, n_steps))
    return simulate_normals(spec, control, normals, n_steps, horizon, keys)


def integrate_paths(spec: SystemSpec, control, q: int, n_steps: int, seed: int,
                    horizon: Optional[float] = None) -> TrajectoryBatch:
    """Sample ``q`` Euler-Maruyama paths under ``control`` up to ``horizon``.

    ``control`` is any callable ``control(t, state) -> u`` (for instance a
    :class:`BenchmarkControl`) or ``None`` for uncontrolled systems.  Path
    ``i`` uses the child stream ``(seed, i)``, so a batch is reproducible and
    independent of how it is chunked.
    """
    if q < 1 or n_steps < 1:
        raise ValueError("q and n_steps must be >= 1")
    grid, states = simulate(spec, control, [(i,) for i in range(q)], seed, n_steps, horizon)
    return TrajectoryBatch(time_grid=grid, states=states, seed=int(seed),
                           position_dim=spec.state_dim, control=control)


def reset(spec: SystemSpec, seed: int) -> np.ndarray:
    """Draw a fresh initial state from the initial law (velocity zero)."""
    rng = np.random.default_rng(seed)
    normals = rng.standard_normal((1, spec.state_dim))
    return _initial_states(spec, normals)[0]


def noise_amplitude(x, center=(5.0, 5.0), width=2.0, amplitude=5.0):
    """Gaussian noise bump ``A exp(-|x - c|^2 / (2 w^2))``."""
    x = np.asarray(x, dtype=float)
    d2 = np.sum((x - np.asarray(center)) ** 2, axis=-1)
    return amplitude * np.exp(-d2 / (2.0 * width**2))


def benchmark_system(center=(5.0, 5.0), width=2.0, amplitude=5.0, initial_std=0.1,
                     t_max=20.0, m=2) -> SystemSpec:
    """2D double integrator with a localized noise bump on the velocity."""
    center = np.asarray(center, dtype=float)

    def drift(state, u):
        return np.concatenate([state[:, 2:], u], axis=1)

    def diffusion(state, u):
        a = noise_amplitude(state[:, :2], center, width, amplitude)
        out = np.zeros((state.shape[0], 4, 2))
        out[:, 2, 0] = a
        out[:, 3, 1] = a
        return out

    return SystemSpec(state_dim=2, control_param_dim=m, drift=drift, diffusion=diffusion,
                      initial_mean=np.zeros(2), initial_std=initial_std, t_max=t_max,
                      second_order=True, noise_dim=2)


def benchmark_regions(box=10.0, reset_radius=2.5) -> RegionSpec:
    """Safe box ``(-box, box)^2`` and reset disk of radius ``reset_radius``."""

    def safe(x):
        return box - np.max(np.abs(np.asarray(x)), axis=-1)

    def resettable(x):
        return reset_radius - np.linalg.norm(np.asarray(x), axis=-1)

    return RegionSpec(safe_indicator=safe, reset_indicator=resettable)


def benchmark_control(theta, speed=2.0, damping=0.5, t_explo=6.0, target=(0.0, 0.0),
                      u_max=None) -> BenchmarkControl:
    return BenchmarkControl(directions=np.asarray(theta, dtype=float), speed=speed,
                            damping=damping, t_explo=t_explo,
                            target=np.asarray(target, dtype=float), u_max=u_max)
