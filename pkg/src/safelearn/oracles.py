"""Ground-truth references: Monte-Carlo maps, analytic OU densities, dense solves.

These deliberately avoid the machinery they check: the Monte-Carlo maps
count raw sample paths, and :func:`dense_reference_solve` inverts matrices
explicitly instead of reusing a factorization.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .sde import BenchmarkControl, SystemSpec, draws_per_path, simulate, simulate_normals

__all__ = [
    "OracleMap",
    "mc_truth_map",
    "mc_truth_maps",
    "survival_curve",
    "ou_density",
    "dense_reference_solve",
    "brownian_exit_probability",
    "thread_count",
]

THREADS_ENV = "SAFELEARN_THREADS"


def thread_count() -> int:
    """Worker threads for oracle simulation, from ``SAFELEARN_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class OracleMap:
    """Monte-Carlo probability per control of ``grid``.

    ``kind`` is ``"pathwise"`` (fraction of paths satisfying the indicator
    at every checked node), ``"marginal"`` (minimum over checked nodes of
    the per-node fraction) or ``"terminal"`` (fraction at the last node).
    """

    grid: np.ndarray
    values: np.ndarray
    paths_per_point: int
    seed: int
    kind: str = "pathwise"

    @property
    def standard_error(self) -> np.ndarray:
        v = self.values
        return np.sqrt(v * (1.0 - v) / self.paths_per_point)


def _default_factory(thetas):
    return BenchmarkControl(directions=thetas)


def _statistic(ok: np.ndarray, kind: str, per: int) -> np.ndarray:
    """``ok`` is ``(candidates * per, nodes)`` booleans for one chunk."""
    ok = ok.reshape(-1, per, ok.shape[-1])
    if kind == "pathwise":
        return ok.all(axis=2).mean(axis=1)
    if kind == "marginal":
        return ok.mean(axis=1).min(axis=1)
    if kind == "terminal":
        return ok[:, :, -1].mean(axis=1)
    raise ValueError(f"unknown oracle kind {kind!r}")


def mc_truth_maps(spec: SystemSpec, grid, statistics: dict, paths_per_point: int, seed: int,
                  control_factory: Optional[Callable] = None, n_steps: int = 500,
                  horizon: Optional[float] = None, nodes=None,
                  max_paths: int = 20000) -> dict:
    """Several Monte-Carlo maps from one set of simulated paths.

    ``statistics`` maps a name to ``(indicator, kind)``.  Candidate ``c``
    draws its paths from the child stream ``(seed, c)``, so every value is
    reproducible on its own regardless of chunking or threading.
    ``nodes`` restricts the checked time nodes (indices into the
    integration grid, default all).
    """
    if paths_per_point < 1:
        raise ValueError("paths_per_point must be >= 1")
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    factory = _default_factory if control_factory is None else control_factory
    per = int(paths_per_point)
    n_cand = len(grid)
    step = max(1, max_paths // per)
    chunks = [(lo, min(lo + step, n_cand)) for lo in range(0, n_cand, step)]
    out = {name: np.empty(n_cand) for name in statistics}

    def run(chunk):
        lo, hi = chunk
        size = draws_per_path(spec, n_steps)
        normals = np.concatenate([
            np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(int(seed), spawn_key=(c,)))).standard_normal((per, size))
            for c in range(lo, hi)])
        control = factory(np.repeat(grid[lo:hi], per, axis=0))
        keys = [(c, j) for c in range(lo, hi) for j in range(per)]
        _, states = simulate_normals(spec, control, normals, n_steps, horizon, keys)
        pos = states[:, :, : spec.state_dim]
        if nodes is not None:
            pos = pos[:, np.asarray(nodes)]
        res = {}
        for name, (indicator, kind) in statistics.items():
            ok = np.asarray(indicator(pos)) >= 0
            res[name] = _statistic(ok, kind, per)
        return lo, hi, res

    workers = thread_count()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    for lo, hi, res in results:
        for name, vals in res.items():
            out[name][lo:hi] = vals
    return {name: OracleMap(grid, out[name], per, int(seed), statistics[name][1])
            for name in statistics}


def mc_truth_map(spec: SystemSpec, grid, indicator: Callable, paths_per_point: int, seed: int,
                 kind: str = "pathwise", **kwargs) -> OracleMap:
    """Monte-Carlo estimate of a probability for every control in ``grid``.

    The default ``kind="pathwise"`` counts the paths whose positions satisfy
    ``indicator >= 0`` at every checked node; ``"terminal"`` gives the
    fraction at the final time.
    """
    return mc_truth_maps(spec, grid, {"value": (indicator, kind)}, paths_per_point, seed,
                         **kwargs)["value"]


def survival_curve(spec: SystemSpec, control, indicator: Callable, paths: int, seed: int,
                   n_steps: int = 500, horizon: Optional[float] = None,
                   max_paths: int = 5000):
    """Fraction of paths satisfying ``indicator >= 0`` at every node up to each node.

    Returns ``(time_grid, values)`` where ``values[k]`` estimates the
    probability of staying in the region on ``[0, time_grid[k]]`` under the
    discrete-grid supremum.  Path ``i`` uses the child stream ``(seed, i)``.
    """
    if paths < 1:
        raise ValueError("paths must be >= 1")
    alive = None
    grid = None
    for lo in range(0, paths, max_paths):
        keys = [(i,) for i in range(lo, min(lo + max_paths, paths))]
        grid, states = simulate(spec, control, keys, seed, n_steps, horizon)
        ok = np.asarray(indicator(states[:, :, : spec.state_dim])) >= 0
        count = np.logical_and.accumulate(ok, axis=1).sum(axis=0)
        alive = count if alive is None else alive + count
    return grid, alive / paths


def ou_density(x, t: float, x0, rate: float, diffusion_const: float):
    """Density at time ``t`` of ``dX = -rate X dt + diffusion dW``, ``X(0) = x0``.

    Componentwise independent Gaussian in any dimension (``x`` of shape
    ``(..., n)`` or scalar in one dimension); ``rate = 0`` is Brownian motion.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if rate == 0:
        mean, var = x0, diffusion_const**2 * t
    else:
        decay = math.exp(-rate * t)
        mean = x0 * decay
        var = diffusion_const**2 * -math.expm1(-2.0 * rate * t) / (2.0 * rate)
    z = (x - mean) ** 2 / var
    dens = np.exp(-0.5 * z) / math.sqrt(2.0 * math.pi * var)
    if x0.ndim == 0 and (x.ndim == 0 or x.shape[-1] != 1):
        return dens
    return np.prod(dens, axis=-1)


def dense_reference_solve(K, ridge: float, targets, kvec, k0: float):
    """Ridge mean and variance by an explicit dense inverse of ``K + ridge I``.

    Returns ``(mean, variance)`` with ``mean = targets^T A^{-1} kvec`` and
    ``variance = k0 - kvec^T A^{-1} kvec``.  ``kvec`` may be ``(N,)`` or
    ``(N, M)`` for ``M`` queries.
    """
    K = np.asarray(K, dtype=float)
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    if not np.allclose(K, K.T, atol=1e-12):
        raise ValueError("K must be symmetric")
    A = K + ridge * np.eye(len(K))
    if np.linalg.cond(A) > 1e14:
        raise np.linalg.LinAlgError("K + ridge I is numerically singular")
    A_inv = np.linalg.inv(A)
    kvec = np.asarray(kvec, dtype=float)
    mean = np.asarray(targets, dtype=float) @ A_inv @ kvec
    var = k0 - np.einsum("i...,ij,j...->...", kvec, A_inv, kvec)
    return mean, var


def brownian_exit_probability(level: float, t: float, terms: int = 50) -> float:
    """``P(sup_{s<=t} |W_s| < level)`` for standard Brownian motion.

    Eigenfunction series of the heat equation on ``(-level, level)``.
    """
    total = 0.0
    for k in range(terms):
        n = 2 * k + 1
        total += (4.0 / (math.pi * n)) * (-1) ** k * math.exp(
            -(n * math.pi) ** 2 * t / (8.0 * level**2))
    return total
