"""Campaign commands: explore, evaluate, predict and maps.

Each command reads a configuration (or a checkpoint carrying one), does its
work and writes its artifacts into an output directory.  All tables carry
the configuration hash and seed of the run in their first line.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import CampaignConfig, dump_config, load_config
from .explorer import CandidateGrid, Thresholds, explore, feasibility_map
from .io import atomic_write_text, load_checkpoint, save_checkpoint, write_csv
from .kernels import KernelModel, confidence_params
from .oracles import mc_truth_maps

__all__ = [
    "CommandResult",
    "cmd_explore",
    "cmd_evaluate",
    "cmd_predict",
    "cmd_maps",
    "learned_maps",
    "oracle_maps",
    "CHECKPOINT_NAME",
]

CHECKPOINT_NAME = "model.ckpt.json"


@dataclass
class CommandResult:
    """Exit status, output directory and the command's summary document."""

    status: int
    out: Path
    summary: dict = field(default_factory=dict)
    report: object = None


def _json(obj):
    if isinstance(obj, dict):
        return {k: _json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path, doc):
    atomic_write_text(path, json.dumps(_json(doc), indent=2, sort_keys=True) + "\n")


def _resolve(config, seed, out, default_seed_attr="explore"):
    if not isinstance(config, CampaignConfig):
        config = load_config(config)
    seed = getattr(config.seeds, default_seed_attr) if seed is None else int(seed)
    out = Path(config.output.directory if out is None else out)
    return config, seed, out


# -- explore ------------------------------------------------------------------
SELECTED_HEADER = ["iteration", "t", "T", "sigma", "s_hat", "r_hat", "lcb_s", "lcb_r",
                   "feasible", "in_gamma0", "s_obs", "r_obs"]


def cmd_explore(config, seed: Optional[int] = None, out=None, progress=None) -> CommandResult:
    """Run a campaign and write ``report.json``, the CSV tables and the checkpoint.

    ``seed`` overrides ``config.seeds.explore`` and ``out`` overrides
    ``config.output.directory``.  Exit status 2 flags an aborted run whose
    partial artifacts were still written.
    """
    config, seed, out = _resolve(config, seed, out)
    config.seeds.explore = seed
    report = explore(config, progress=progress)
    h = config.config_hash()
    m = config.control.n_directions
    theta_cols = [f"theta_{i + 1}" for i in range(m)]

    rows = [[r["iteration"], *r["theta"], r["t"], r["T"], r["sigma"], r["s_pred"], r["r_pred"],
             r["lcb_s"], r["lcb_r"], r["feasible"], r["in_gamma0"], r["s_obs"], r["r_obs"]]
            for r in report.rows]
    header = ["iteration", *theta_cols, *SELECTED_HEADER[1:]]
    write_csv(out / "selected.csv", header, rows, h, seed)
    write_csv(out / "certified_set.csv", [*theta_cols, "t", "T"],
              [[*p.theta, p.t, p.T] for p in report.certified], h, seed)
    write_csv(out / "info_gain.csv", ["iteration", "n", "info_gain"],
              [[r["iteration"], r["iteration"] + 1, r["info_gain"]] for r in report.rows], h, seed)
    save_checkpoint(out / CHECKPOINT_NAME, report.model, config, seed,
                    extra={"stop_reason": report.state.reason})
    atomic_write_text(out / "config.cfg", dump_config(config))

    certified_theta = sorted({p.theta for p in report.certified})
    summary = {
        "config_hash": h,
        "seed": seed,
        "iterations": report.n_selected,
        "stop_reason": report.state.reason,
        "radius": report.state.radius,
        "excluded": int(report.state.excluded.sum()),
        "thresholds": {"epsilon": report.thresholds.epsilon, "xi": report.thresholds.xi,
                       "beta_s": report.thresholds.beta_s, "beta_r": report.thresholds.beta_r},
        "certified_points": len(report.certified),
        "certified_controls": len(certified_theta),
        "all_selected_feasible": all(r["feasible"] for r in report.rows),
        "info_gain": report.info_gain.tolist(),
        "sigma_at_selection": [r["sigma"] for r in report.rows],
        "s_pred_at_selection": [r["s_pred"] for r in report.rows],
        "r_pred_at_selection": [r["r_pred"] for r in report.rows],
        "wall_time_s": report.wall_time,
        "mean_iteration_s": report.wall_time / max(1, report.n_selected),
        "error": report.error,
    }
    _write_json(out / "report.json", summary)
    return CommandResult(2 if report.error else 0, out, summary, report)


# -- shared map helpers ---------------------------------------------------------
def learned_maps(model: KernelModel, grid: CandidateGrid, theta_index=None):
    """Learned safety-up-to-horizon and terminal reset maps per control.

    Safety is ``min_j clip(s_hat(theta, t_j), 0, 1)`` over the observation
    times, reset is ``clip(r_hat(theta, T), 0, 1)``; ``sigma`` is the largest
    uncertainty over the observation times.
    """
    thetas = grid.thetas if theta_index is None else grid.thetas[theta_index]
    J = grid.n_times
    z = model.embed(np.repeat(thetas, J, axis=0), np.tile(grid.times, len(thetas)))
    s, r, sig = (a.reshape(len(thetas), J) for a in model.predict_all(z))
    last = int(np.argmin(np.abs(grid.times - grid.horizon)))
    return (np.clip(s, 0, 1).min(axis=1), np.clip(r[:, last], 0, 1), sig.max(axis=1))


def oracle_maps(config: CampaignConfig, thetas, paths: int, seed: int):
    """Monte-Carlo safety (minimum over observation times) and terminal reset."""
    grid = CandidateGrid.from_config(config)
    nodes = np.rint(grid.times / (config.system.t_max / config.control.n_steps)).astype(int)
    regions = config.build_regions()
    c = config.control

    def factory(th):
        return config.build_control(th)

    maps = mc_truth_maps(config.build_system(), thetas,
                         {"safety": (regions.safe_indicator, "marginal"),
                          "reset": (regions.reset_indicator, "terminal")},
                         paths, seed, control_factory=factory, n_steps=c.n_steps, nodes=nodes)
    return maps["safety"].values, maps["reset"].values


def _load(checkpoint, config, out, seed):
    model, ck_config, doc = load_checkpoint(checkpoint)
    if config is not None and not isinstance(config, CampaignConfig):
        config = load_config(config)
    config = ck_config if config is None else config
    seed = config.seeds.evaluate if seed is None else int(seed)
    out = Path(checkpoint).parent if out is None else Path(out)
    return model, config, doc, seed, out


def _default_checkpoint(config, checkpoint):
    if checkpoint is not None:
        return Path(checkpoint)
    if config is None:
        raise FileNotFoundError("either a checkpoint or a config with an output directory is needed")
    if not isinstance(config, CampaignConfig):
        config = load_config(config)
    return Path(config.output.directory) / CHECKPOINT_NAME


# -- evaluate -----------------------------------------------------------------
def cmd_evaluate(checkpoint=None, config=None, seed: Optional[int] = None, out=None,
                 n_test: int = 1000, paths: int = 100) -> CommandResult:
    """Prediction error of the learned maps against a Monte-Carlo oracle.

    ``n_test`` controls are drawn uniformly without replacement from the
    lattice (with replacement if the lattice is smaller); the oracle uses
    ``paths`` trajectories per control.  Writes ``metrics.json`` and
    ``evaluation.csv``.
    """
    checkpoint = _default_checkpoint(config, checkpoint)
    model, config, doc, seed, out = _load(checkpoint, config, out, seed)
    grid = CandidateGrid.from_config(config)
    rng = np.random.default_rng(seed)
    idx = rng.choice(grid.n_theta, n_test, replace=n_test > grid.n_theta)
    s_hat, r_hat, sig = learned_maps(model, grid, idx)
    s_true, r_true = oracle_maps(config, grid.thetas[idx], paths, seed)
    es, er = (s_hat - s_true) ** 2, (r_hat - r_true) ** 2
    summary = {
        "config_hash": doc["config_hash"],
        "seed": seed,
        "n_train": model.n,
        "n_test": int(n_test),
        "oracle_paths": int(paths),
        "safety_mse": float(es.mean()),
        "safety_std": float(es.std()),
        "reset_mse": float(er.mean()),
        "reset_std": float(er.std()),
    }
    m = grid.thetas.shape[1]
    write_csv(out / "evaluation.csv",
              [*(f"theta_{i + 1}" for i in range(m)), "s_pred", "s_oracle", "r_pred", "r_oracle",
               "sigma_max"],
              [[*grid.thetas[i], a, b, c, d, e]
               for i, a, b, c, d, e in zip(idx, s_hat, s_true, r_hat, r_true, sig)],
              doc["config_hash"], seed)
    _write_json(out / "metrics.json", summary)
    return CommandResult(0, out, summary)


# -- predict ----------------------------------------------------------------------
def cmd_predict(checkpoint=None, theta=None, t: float = 0.0, config=None,
                seed: Optional[int] = None, out=None, x_low=(-10.0, -10.0),
                x_high=(10.0, 10.0), resolution: int = 50, filename="predict.csv") -> CommandResult:
    """Predicted density on a ``resolution**2`` position grid at ``(theta, t)``.

    Writes the raw (possibly negative) and clipped density with the safety,
    reset and uncertainty predictions repeated on each row.
    """
    checkpoint = _default_checkpoint(config, checkpoint)
    model, config, doc, seed, out = _load(checkpoint, config, out, seed)
    if theta is None:
        theta = config.learning.initial_theta
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if len(theta) != config.control.n_directions:
        raise ValueError(f"theta needs {config.control.n_directions} entries")
    start = time.perf_counter()
    axes = [np.linspace(lo, hi, resolution) if resolution > 1 else np.array([0.5 * (lo + hi)])
            for lo, hi in zip(x_low, x_high)]
    mesh = np.meshgrid(*axes, indexing="ij")
    xs = np.column_stack([g.ravel() for g in mesh])
    z = model.embed(theta[None], t)
    s, r, sig = (float(a[0]) for a in model.predict_all(z))
    dens = model.predict_density(z[0], xs) if model.n else np.zeros(len(xs))
    elapsed = time.perf_counter() - start
    rows = [[*x, d, max(d, 0.0), s, r, sig] for x, d in zip(xs, dens)]
    header = [*(f"x_{i + 1}" for i in range(xs.shape[1])), "density_raw", "density_clipped",
              "s_hat", "r_hat", "sigma"]
    write_csv(out / filename, header, rows, doc["config_hash"], seed)
    summary = {"config_hash": doc["config_hash"], "seed": seed, "theta": theta.tolist(), "t": t,
               "points": len(xs), "s_hat": s, "r_hat": r, "sigma": sig, "runtime_s": elapsed}
    _write_json(out / (Path(filename).stem + ".json"), summary)
    return CommandResult(0, out, summary)


# -- maps -----------------------------------------------------------------------
def cmd_maps(checkpoint=None, config=None, seed: Optional[int] = None, out=None,
             oracle_paths: int = 100) -> CommandResult:
    """Learned maps with feasibility flags over the whole control lattice.

    With ``oracle_paths > 0`` a Monte-Carlo oracle is added per control and
    the RMS differences are reported in ``maps_summary.json``.
    """
    checkpoint = _default_checkpoint(config, checkpoint)
    model, config, doc, seed, out = _load(checkpoint, config, out, seed)
    grid = CandidateGrid.from_config(config)
    lr = config.learning
    beta = confidence_params(model, lr)
    thr = Thresholds(lr.epsilon, lr.xi, beta.beta_s, beta.beta_r)
    fmap = feasibility_map(model, grid, thr)
    feas = fmap.feasible_theta.copy()
    feas[grid.gamma0_theta] |= True
    s_map, r_map, sig = learned_maps(model, grid)
    m = grid.thetas.shape[1]
    header = [*(f"theta_{i + 1}" for i in range(m)), "s_hat", "r_hat", "sigma", "lcb_s", "lcb_r",
              "feasible"]
    cols = [s_map, r_map, sig, fmap.lcb_s, fmap.lcb_r, feas]
    summary = {"config_hash": doc["config_hash"], "seed": seed, "controls": grid.n_theta,
               "feasible_controls": int(feas.sum())}
    if oracle_paths > 0:
        s_true, r_true = oracle_maps(config, grid.thetas, oracle_paths, seed)
        header += ["s_oracle", "r_oracle"]
        cols += [s_true, r_true]
        summary.update(oracle_paths=int(oracle_paths),
                       safety_rms=float(np.sqrt(np.mean((s_map - s_true) ** 2))),
                       reset_rms=float(np.sqrt(np.mean((r_map - r_true) ** 2))))
    rows = [[*grid.thetas[l], *(c[l] for c in cols)] for l in range(grid.n_theta)]
    write_csv(out / "maps.csv", header, rows, doc["config_hash"], seed)
    _write_json(out / "maps_summary.json", summary)
    return CommandResult(0, out, summary)
