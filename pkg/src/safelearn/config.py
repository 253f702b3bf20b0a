"""Campaign configuration: a sectioned key-value file (or JSON).

Grammar of the ``.cfg`` format (read with :mod:`configparser`)::

    [section]
    key = value        ; comments start with ';' or '#'

Values are floats/ints written in Python notation, ``inf`` for an infinite
threshold, comma-separated lists for vectors, ``auto`` for "derive from
other fields" and bare words for enumerations.  Sections are ``system``,
``control``, ``learning``, ``seeds`` and ``output``; omitted keys take the
defaults below.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .density import bandwidth_rule
from .kernels import KernelModel, MaternKernel
from .sde import BenchmarkControl, RegionSpec, benchmark_regions, benchmark_system

__all__ = [
    "ConfigError",
    "SystemConfig",
    "ControlConfig",
    "LearningConfig",
    "SeedConfig",
    "OutputConfig",
    "CampaignConfig",
    "load_config",
    "parse_config",
    "dump_config",
]


class ConfigError(ValueError):
    """Invalid campaign configuration; ``errors`` lists ``section.key: message``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class SystemConfig:
    noise_center: tuple = (5.0, 5.0)
    noise_width: float = 2.0
    noise_amplitude: float = 5.0
    initial_std: float = 0.1
    t_max: float = 20.0
    safe_box: float = 10.0
    reset_radius: float = 2.5


@dataclass
class ControlConfig:
    speed: float = 2.0
    damping: float = 0.5
    n_directions: int = 2
    t_explo: float = 6.0
    n_steps: int = 500
    u_max: Optional[float] = None  # auto: 2 * speed


@dataclass
class LearningConfig:
    epsilon: float = 0.1
    xi: float = 0.1
    beta_mode: str = "constant"
    beta_collect: float = 2.0
    beta_s: Optional[float] = None
    beta_r: Optional[float] = None
    beta_p: Optional[float] = None
    beta_norm_s: float = 1.0
    beta_norm_r: float = 1.0
    beta_norm_p: float = 1.0
    beta_error_proxy: Optional[float] = None
    nu: float = 2.5
    length_scale: float = 1.0
    amplitude: float = 1.0
    time_scale: Optional[float] = None  # auto: t_max
    lambda_policy: Union[str, float] = "inverse_n"
    kde_length_scale: float = 1.0
    kde_amplitude: float = 1.0
    kde_lambda_policy: Union[str, float] = "inverse_n"
    kde_nu: float = 2.5
    kde_bandwidth: Optional[float] = None
    q_paths: int = 200
    q_prime: int = 10000
    probability_estimator: str = "samples"
    eta: float = 0.5
    max_iterations: int = 1000
    theta_low: float = -math.pi
    theta_high: float = math.pi
    theta_resolution: int = 40
    time_resolution: int = 50
    radius_growth: float = 2.0
    selection_mode: str = "first"
    initial_theta: tuple = (-math.pi / 3, math.pi / 3)


@dataclass
class SeedConfig:
    explore: int = 0
    evaluate: int = 1


@dataclass
class OutputConfig:
    directory: str = "runs/default"


_SECTIONS = {
    "system": SystemConfig,
    "control": ControlConfig,
    "learning": LearningConfig,
    "seeds": SeedConfig,
    "output": OutputConfig,
}


@dataclass
class CampaignConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    # -- derived objects ---------------------------------------------------
    def build_system(self):
        s = self.system
        return benchmark_system(center=s.noise_center, width=s.noise_width,
                                amplitude=s.noise_amplitude, initial_std=s.initial_std,
                                t_max=s.t_max, m=self.control.n_directions)

    def build_regions(self) -> RegionSpec:
        return benchmark_regions(self.system.safe_box, self.system.reset_radius)

    def build_control(self, theta) -> BenchmarkControl:
        c = self.control
        return BenchmarkControl(directions=np.asarray(theta, dtype=float), speed=c.speed,
                                damping=c.damping, t_explo=c.t_explo, target=np.zeros(2),
                                u_max=c.u_max)

    @property
    def time_scale(self) -> float:
        lr = self.learning
        return self.system.t_max if lr.time_scale is None else float(lr.time_scale)

    def kde_bandwidth(self) -> float:
        lr = self.learning
        if lr.kde_bandwidth is not None:
            return float(lr.kde_bandwidth)
        return bandwidth_rule(lr.q_paths, 2, lr.kde_nu)

    def build_model(self) -> KernelModel:
        lr = self.learning
        kernel = MaternKernel(lr.nu, lr.length_scale, lr.amplitude)
        kde_kernel = MaternKernel(lr.nu, lr.kde_length_scale, lr.kde_amplitude)
        return KernelModel(kernel, kde_kernel, lam=lr.lambda_policy,
                           kde_lam=lr.kde_lambda_policy, time_scale=self.time_scale,
                           input_dim=self.control.n_directions + 1).fit()

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}

    def config_hash(self) -> str:
        blob = json.dumps(_jsonable(self.to_dict()), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> "CampaignConfig":
        errors = []
        lr, ctl, sysc = self.learning, self.control, self.system

        def check(cond, where, msg):
            if not cond:
                errors.append(f"{where}: {msg}")

        for key in ("epsilon", "xi"):
            v = getattr(lr, key)
            check(math.isinf(v) and v > 0 or 0.0 <= v <= 1.0, f"learning.{key}",
                  "must lie in [0, 1] or be inf")
        check(lr.eta > 0, "learning.eta", "must be positive")
        check(lr.beta_mode in ("constant", "theoretical"), "learning.beta_mode",
              "must be 'constant' or 'theoretical'")
        for key in ("beta_collect", "beta_s", "beta_r", "beta_p", "beta_norm_s",
                    "beta_norm_r", "beta_norm_p", "beta_error_proxy"):
            v = getattr(lr, key)
            check(v is None or v >= 0, f"learning.{key}", "must be nonnegative")
        for key in ("nu", "length_scale", "amplitude", "kde_length_scale",
                    "kde_amplitude", "radius_growth"):
            check(getattr(lr, key) > 0, f"learning.{key}", "must be positive")
        check(lr.time_scale is None or lr.time_scale > 0, "learning.time_scale",
              "must be positive or auto")
        check(lr.radius_growth > 1, "learning.radius_growth", "must exceed 1")
        for key in ("lambda_policy", "kde_lambda_policy"):
            v = getattr(lr, key)
            check(v == "inverse_n" or (isinstance(v, (int, float)) and v > 0),
                  f"learning.{key}", "must be 'inverse_n' or a positive number")
        check(lr.kde_nu > 1.0, "learning.kde_nu", "must exceed n/2 = 1 (state dimension 2)")
        check(lr.kde_bandwidth is None or lr.kde_bandwidth > 0, "learning.kde_bandwidth",
              "must be positive or auto")
        for key in ("q_paths", "q_prime", "theta_resolution", "time_resolution"):
            check(getattr(lr, key) >= 1, f"learning.{key}", "must be >= 1")
        check(lr.max_iterations >= 0, "learning.max_iterations", "must be >= 0")
        check(lr.probability_estimator in ("samples", "density"),
              "learning.probability_estimator", "must be 'samples' or 'density'")
        check(lr.selection_mode in ("first", "argmax"), "learning.selection_mode",
              "must be 'first' or 'argmax'")
        check(lr.theta_high > lr.theta_low, "learning.theta_high", "must exceed theta_low")
        check(len(lr.initial_theta) == ctl.n_directions, "learning.initial_theta",
              f"needs {ctl.n_directions} entries")
        check(ctl.n_steps >= 1, "control.n_steps", "must be >= 1")
        check(ctl.n_directions >= 1, "control.n_directions", "must be >= 1")
        for key in ("speed", "damping", "t_explo"):
            check(getattr(ctl, key) > 0, f"control.{key}", "must be positive")
        check(ctl.u_max is None or ctl.u_max > 0, "control.u_max", "must be positive or auto")
        check(0 < ctl.t_explo <= sysc.t_max, "control.t_explo", "must lie in (0, t_max]")
        check(sysc.t_max > 0, "system.t_max", "must be positive")
        check(sysc.initial_std >= 0, "system.initial_std", "must be nonnegative")
        check(len(sysc.noise_center) == 2, "system.noise_center", "needs 2 entries")
        if errors:
            raise ConfigError(errors)
        return self


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, str):
        try:
            return float(text)
        except ValueError:
            return text
    # default is None: number if it parses, else the literal
    if text.lower() in ("auto", "none", ""):
        return None
    try:
        return float(text)
    except ValueError:
        return text


def _parse_value(raw, default):
    if isinstance(raw, str) and raw.strip().lower() in ("auto", "none") and not isinstance(
            default, (tuple, str)):
        return None
    if isinstance(default, tuple):
        items = raw if isinstance(raw, (list, tuple)) else [p for p in str(raw).split(",")]
        return tuple(float(v) for v in items)
    if not isinstance(raw, str):
        if raw is None:
            return None
        if isinstance(default, float) and isinstance(raw, (int, float)):
            return float(raw)
        return raw
    return _parse_scalar(raw, default)


def _from_mapping(data: dict) -> CampaignConfig:
    errors = []
    sections = {}
    for name, cls in _SECTIONS.items():
        defaults = cls()
        raw = dict(data.get(name, {}))
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                errors.append(f"{name}.{key}: unknown key")
        for f in fields(cls):
            if f.name in raw:
                try:
                    kwargs[f.name] = _parse_value(raw[f.name], getattr(defaults, f.name))
                except (TypeError, ValueError) as exc:
                    errors.append(f"{name}.{f.name}: cannot parse {raw[f.name]!r} ({exc})")
        sections[name] = cls(**kwargs)
    for name in data:
        if name not in _SECTIONS and name != "DEFAULT":
            errors.append(f"{name}: unknown section")
    config = CampaignConfig(**sections)
    try:
        config.validate()
    except ConfigError as exc:
        errors.extend(exc.errors)
    if errors:
        raise ConfigError(errors)
    return config


def parse_config(text: str) -> CampaignConfig:
    """Parse ``.cfg`` or JSON text into a validated :class:`CampaignConfig`."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return _from_mapping(json.loads(text))
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    return _from_mapping({s: dict(parser.items(s)) for s in parser.sections()})


def load_config(path) -> CampaignConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(config: CampaignConfig) -> str:
    """Serialize to the ``.cfg`` format; ``parse_config(dump_config(c)) == c``."""
    out = io.StringIO()
    for name in _SECTIONS:
        out.write(f"[{name}]\n")
        for key, value in dataclasses.asdict(getattr(config, name)).items():
            out.write(f"{key} = {_format(value)}\n")
        out.write("\n")
    return out.getvalue()
