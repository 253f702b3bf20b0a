"""Bessel-kernel density estimation and probability estimates from samples."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import gamma, j1, jv

from .sde import ControlPoint, TrajectoryBatch

__all__ = [
    "ConfigurationError",
    "KdeEstimate",
    "ObservationRecord",
    "bessel_kernel",
    "bessel_kernel_radial",
    "kde_density",
    "bandwidth_rule",
    "probability_from_samples",
    "probability_from_density",
    "SERIES_SWITCH",
]


class ConfigurationError(ValueError):
    """A parameter violates a modelling assumption."""


# series branch used for 2*pi*R*|x| below this value
SERIES_SWITCH = 1e-4


def bessel_kernel_radial(r, n: int, bandwidth: float):
    """``rho_R`` as a function of the radius ``r = |x|`` in dimension ``n``.

    ``rho_R(x) = R^{n/2} |x|^{-n/2} J_{n/2}(2 pi R |x|)``, the inverse Fourier
    transform of the indicator of the frequency ball of radius ``R``.
    """
    r = np.asarray(r, dtype=float)
    R = float(bandwidth)
    nu = n / 2.0
    z = 2.0 * np.pi * R * r
    small = z <= SERIES_SWITCH
    out = np.empty_like(z)

    # J_nu(z) = sum_k (-1)^k (z/2)^{2k+nu} / (k! Gamma(k+nu+1)), three terms
    w = (np.pi * R * r[small]) ** 2
    lead = np.pi**nu * R**n
    out[small] = lead * (1.0 / gamma(nu + 1)
                         - w / gamma(nu + 2)
                         + w * w / (2.0 * gamma(nu + 3)))

    rb, zb = r[~small], z[~small]
    out[~small] = R**nu * rb ** (-nu) * _bessel_j(n, zb)
    return out


def _bessel_j(n: int, z):
    """``J_{n/2}(z)`` with closed forms / specialised routines for ``n <= 3``."""
    if n == 1:
        return np.sqrt(2.0 / (np.pi * z)) * np.sin(z)
    if n == 2:
        return j1(z)
    if n == 3:
        # the closed form cancels badly near zero
        out = jv(1.5, z)
        big = z > 0.5
        zb = z[big]
        out[big] = np.sqrt(2.0 / (np.pi * zb)) * (np.sin(zb) / zb - np.cos(zb))
        return out
    return jv(n / 2.0, z)


def bessel_kernel(x, bandwidth: float):
    """Evaluate ``rho_R`` at points ``x`` of shape ``(..., n)``."""
    if bandwidth <= 0:
        raise ConfigurationError("bandwidth must be positive")
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    n = x.shape[-1]
    return bessel_kernel_radial(np.linalg.norm(x, axis=-1), n, bandwidth)


def bandwidth_rule(q: int, n: int, nu: float) -> float:
    """Frequency cut-off ``R = Q^{1/(n + 2 nu)}``; requires ``nu > n/2``."""
    if q < 1:
        raise ValueError("q must be >= 1")
    if nu <= n / 2.0:
        raise ConfigurationError(f"smoothness nu={nu} must exceed n/2={n / 2}")
    return float(q) ** (1.0 / (n + 2.0 * nu))


@dataclass(frozen=True)
class KdeEstimate:
    """Samples ``(Q, n)`` and the frequency cut-off ``R`` of a Bessel KDE."""

    samples: np.ndarray
    bandwidth: float

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] < 1:
            raise ValueError("a KDE needs at least one sample")
        if self.bandwidth <= 0:
            raise ConfigurationError("bandwidth must be positive")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def q(self) -> int:
        return self.samples.shape[0]

    def __call__(self, x):
        return kde_density(self, x)


def kde_density(est: KdeEstimate, x):
    """Raw (possibly negative) KDE value ``(1/Q) sum_i rho_R(x - X_i)``.

    ``x`` is a single point of shape ``(n,)`` or a batch ``(M, n)``; in one
    dimension a flat array is read as a batch.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 0 or (x.ndim == 1 and est.dim > 1)
    pts = x.reshape(-1, est.dim)
    out = np.empty(pts.shape[0])
    chunk = max(1, 2**21 // (est.q * est.dim))
    for lo in range(0, pts.shape[0], chunk):
        block = pts[lo:lo + chunk]
        r = np.linalg.norm(block[:, None, :] - est.samples[None, :, :], axis=-1)
        out[lo:lo + chunk] = bessel_kernel_radial(r, est.dim, est.bandwidth).mean(axis=1)
    if single:
        return float(out[0])
    return out


@dataclass(frozen=True)
class ObservationRecord:
    """Training datum collected at one visited control point."""

    point: ControlPoint
    kde: KdeEstimate
    s_hat: float
    r_hat: float
    warnings: tuple = field(default=())

    def __post_init__(self):
        for name in ("s_hat", "r_hat"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")


def probability_from_samples(batch: TrajectoryBatch, t: float, indicator: Callable) -> float:
    """Fraction of paths whose position at time ``t`` satisfies ``indicator >= 0``."""
    idx = batch.node_index(t)
    node = batch.time_grid[idx]
    if abs(node - t) > 1e-9 * max(1.0, abs(t)):
        warnings.warn(f"t={t} is not a grid node; snapped to {node}", RuntimeWarning,
                      stacklevel=2)
    pos = batch.states[:, idx, : batch.position_dim]
    return float(np.mean(np.asarray(indicator(pos)) >= 0))


def _default_box(est: KdeEstimate):
    margin = 3.0 / est.bandwidth
    return est.samples.min(axis=0) - margin, est.samples.max(axis=0) + margin


def probability_from_density(est: KdeEstimate, indicator: Callable, mc_points: int,
                             seed: int = 0, box: Optional[tuple] = None) -> float:
    """Monte-Carlo integral of the KDE over ``{indicator >= 0}``, clipped to [0, 1].

    ``box`` is ``(lower, upper)``; by default the sample bounding box padded
    by ``3 / R``.
    """
    if mc_points <= 0:
        raise ValueError("mc_points must be positive")
    lo, hi = _default_box(est) if box is None else (np.asarray(box[0], float),
                                                    np.asarray(box[1], float))
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(mc_points, est.dim))
    mask = np.asarray(indicator(pts)) >= 0
    if not mask.any():
        return 0.0
    volume = float(np.prod(hi - lo))
    vals = np.zeros(mc_points)
    vals[mask] = kde_density(est, pts[mask])
    return float(np.clip(volume * vals.mean(), 0.0, 1.0))
