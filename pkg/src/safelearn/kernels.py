"""Matérn kernel ridge regressors for the safety, reset and density maps.

The three maps share the training inputs ``z_i = (theta_i, t_i / time_scale)``
and differ only in their targets: scalars ``s_hat_i``, ``r_hat_i`` and the
function-valued KDEs ``p_hat_i``.  Safety and reset use the *collect*
kernel; the density map may use its own kernel and ridge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import gamma as gamma_fn, kv

from .density import ConfigurationError, KdeEstimate, ObservationRecord, kde_density
from .sde import ControlPoint

__all__ = [
    "MaternKernel",
    "KernelModel",
    "ConfidenceParams",
    "NumericalDegeneracyError",
    "ModelStateError",
    "matern",
    "fit",
    "add_point",
    "predict_safety",
    "predict_reset",
    "predict_density",
    "predictive_std",
    "confidence_params",
    "information_gain",
]

JITTER = 1e-10


class NumericalDegeneracyError(ArithmeticError):
    """The regularized Gram matrix could not be factorized, or a variance went negative."""


class ModelStateError(RuntimeError):
    """Prediction requested from a model whose factorization is stale."""


@dataclass(frozen=True)
class MaternKernel:
    """Stationary Matérn kernel with ``k(z, z) = amplitude``."""

    smoothness: float = 2.5
    length_scale: float = 1.0
    amplitude: float = 1.0

    def __post_init__(self):
        if min(self.smoothness, self.length_scale, self.amplitude) <= 0:
            raise ConfigurationError("Matérn parameters must be positive")

    def from_distance(self, d):
        d = np.asarray(d, dtype=float)
        nu, amp = self.smoothness, self.amplitude
        if nu == 0.5:
            return amp * np.exp(-d / self.length_scale)
        if nu == 1.5:
            a = math.sqrt(3.0) * d / self.length_scale
            return amp * (1.0 + a) * np.exp(-a)
        if nu == 2.5:
            a = math.sqrt(5.0) * d / self.length_scale
            return amp * (1.0 + a + a * a / 3.0) * np.exp(-a)
        a = math.sqrt(2.0 * nu) * d / self.length_scale
        with np.errstate(invalid="ignore"):
            val = amp * 2.0 ** (1.0 - nu) / gamma_fn(nu) * a**nu * kv(nu, a)
        return np.where(a == 0, amp, val)

    def __call__(self, a, b):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        return self.from_distance(cdist(a, b))


def matern(z1, z2, kernel: MaternKernel) -> float:
    d = np.linalg.norm(np.asarray(z1, dtype=float) - np.asarray(z2, dtype=float))
    return float(kernel.from_distance(d))


def _cholesky(mat, amplitude):
    try:
        return cholesky(mat, lower=True)
    except LinAlgError:
        pass
    try:
        return cholesky(mat + JITTER * amplitude * np.eye(len(mat)), lower=True)
    except LinAlgError as exc:
        raise NumericalDegeneracyError("K + N lambda I is not positive definite") from exc


class _Factor:
    """Lower Cholesky factor of ``K + ridge I`` for one kernel."""

    def __init__(self, kernel, inputs, ridge):
        self.kernel = kernel
        self.ridge = ridge
        self.L = _cholesky(kernel(inputs, inputs) + ridge * np.eye(len(inputs)),
                           kernel.amplitude)

    def append(self, inputs, z):
        """Extend by one row; ``inputs`` already excludes ``z``."""
        kz = self.kernel(inputs, z[None])[:, 0]
        row = solve_triangular(self.L, kz, lower=True)
        d2 = self.kernel.amplitude + self.ridge - row @ row
        if d2 <= 0:
            return False
        n = len(self.L)
        L = np.zeros((n + 1, n + 1))
        L[:n, :n] = self.L
        L[n, :n] = row
        L[n, n] = math.sqrt(d2)
        self.L = L
        return True

    def solve(self, rhs):
        return cho_solve((self.L, True), rhs)

    def half_solve(self, rhs):
        return solve_triangular(self.L, rhs, lower=True)


class KernelModel:
    """Kernel ridge regressors over ``(theta, t)``.

    Parameters
    ----------
    kernel : MaternKernel
        Kernel for the safety and reset maps (and for ``sigma_N``).
    kde_kernel : MaternKernel, optional
        Kernel for the density map; defaults to ``kernel``.
    lam : "inverse_n" or float
        Regularization policy.  ``"inverse_n"`` sets ``lambda = 1/N`` so the
        ridge ``N lambda`` stays 1.
    kde_lam : "inverse_n" or float, optional
        Policy for the density map; defaults to ``lam``.
    time_scale : float
        Time is divided by this before entering the kernel.
    """

    def __init__(self, kernel: MaternKernel, kde_kernel: Optional[MaternKernel] = None,
                 lam: Union[str, float] = "inverse_n",
                 kde_lam: Union[str, float, None] = None,
                 time_scale: float = 1.0, input_dim: Optional[int] = None):
        self.kernel = kernel
        self.kde_kernel = kernel if kde_kernel is None else kde_kernel
        self.lam = lam
        self.kde_lam = lam if kde_lam is None else kde_lam
        self.time_scale = float(time_scale)
        self.input_dim = input_dim
        self.inputs = np.empty((0, input_dim or 0))
        self.s_targets = np.empty(0)
        self.r_targets = np.empty(0)
        self.kdes: list = []
        self.points: list = []
        self.prior_var: list = []
        self._factor: Optional[_Factor] = None
        self._kde_factor: Optional[_Factor] = None
        self._alpha_s = self._alpha_r = None
        self._stale = False
        for policy in (self.lam, self.kde_lam):
            if policy != "inverse_n" and not float(policy) > 0:
                raise ConfigurationError("lambda must be 'inverse_n' or a positive float")

    # -- bookkeeping -----------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.s_targets)

    @property
    def fitted(self) -> bool:
        return not self._stale

    def lambda_value(self, policy=None, n=None) -> float:
        policy = self.lam if policy is None else policy
        n = self.n if n is None else n
        if policy == "inverse_n":
            return 1.0 / max(n, 1)
        return float(policy)

    def ridge(self, policy=None, n=None) -> float:
        """``N lambda``; exactly 1 under the ``"inverse_n"`` policy."""
        policy = self.lam if policy is None else policy
        n = self.n if n is None else n
        if policy == "inverse_n":
            return 1.0
        return n * float(policy)

    def embed(self, theta, t):
        """Kernel inputs ``(theta, t / time_scale)`` with shape ``(M, m + 1)``."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (theta.shape[0],))
        return np.column_stack([theta, t / self.time_scale])

    def set_data(self, inputs, s_targets, r_targets=None, kdes=None):
        """Replace the training set; the model must be refit afterwards."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        self.inputs = inputs
        self.s_targets = np.asarray(s_targets, dtype=float).reshape(-1)
        self.r_targets = (np.zeros_like(self.s_targets) if r_targets is None
                          else np.asarray(r_targets, dtype=float).reshape(-1))
        self.kdes = list(kdes) if kdes is not None else [None] * len(self.s_targets)
        self.points = [None] * len(self.s_targets)
        self.input_dim = inputs.shape[1]
        if not (len(inputs) == len(self.s_targets) == len(self.r_targets) == len(self.kdes)):
            raise ValueError("inputs, targets and KDEs must have equal length")
        self._stale = True
        return self

    # -- fitting ---------------------------------------------------------
    def fit(self):
        """Assemble and factorize ``K + N lambda I`` for both kernels."""
        if self.n == 0:
            self._factor = self._kde_factor = None
            self._alpha_s = self._alpha_r = np.empty(0)
            self._stale = False
            return self
        self._factor = _Factor(self.kernel, self.inputs, self.ridge())
        if self._shared_kde():
            self._kde_factor = self._factor
        else:
            self._kde_factor = _Factor(self.kde_kernel, self.inputs,
                                       self.ridge(self.kde_lam))
        self._refresh_coefficients()
        self._stale = False
        return self

    def _shared_kde(self):
        return self.kde_kernel == self.kernel and self.kde_lam == self.lam

    def _refresh_coefficients(self):
        self._alpha_s = self._factor.solve(self.s_targets)
        self._alpha_r = self._factor.solve(self.r_targets)

    def add(self, z, s_hat, r_hat, kde=None, point=None):
        """Append one observation at kernel input ``z`` and refit.

        With ``lam="inverse_n"`` the ridge is constant, so the Cholesky
        factor is extended by one row instead of being recomputed.
        """
        self._require_fitted()
        z = np.asarray(z, dtype=float).reshape(-1)
        if self.input_dim is None or self.inputs.shape[1] == 0:
            self.input_dim = len(z)
            self.inputs = np.empty((0, len(z)))
        self.prior_var.append(float(self.predictive_var(z[None])[0]))
        old = self.inputs
        old_ridge, old_kde_ridge = self.ridge(), self.ridge(self.kde_lam)
        self.inputs = np.vstack([old, z[None]])
        self.s_targets = np.append(self.s_targets, float(s_hat))
        self.r_targets = np.append(self.r_targets, float(r_hat))
        self.kdes.append(kde)
        self.points.append(point)

        grown = self._factor is not None and self.ridge() == old_ridge and self._factor.append(old, z)
        if not grown:
            return self.fit()
        if self._shared_kde():
            self._kde_factor = self._factor
        elif not (self.ridge(self.kde_lam) == old_kde_ridge
                  and self._kde_factor.append(old, z)):
            self._kde_factor = _Factor(self.kde_kernel, self.inputs, self.ridge(self.kde_lam))
        self._refresh_coefficients()
        return self

    # -- prediction ------------------------------------------------------
    def _require_fitted(self):
        if self._stale:
            raise ModelStateError("model has unfitted data; call fit() first")

    def coefficients(self):
        """Dual coefficients ``(K + N lambda I)^{-1} S_hat`` and for ``R_hat``."""
        self._require_fitted()
        return self._alpha_s, self._alpha_r

    def predict_safety(self, z):
        self._require_fitted()
        if self.n == 0:
            return np.zeros(len(np.atleast_2d(z)))
        return self.kernel(z, self.inputs) @ self._alpha_s

    def predict_reset(self, z):
        self._require_fitted()
        if self.n == 0:
            return np.zeros(len(np.atleast_2d(z)))
        return self.kernel(z, self.inputs) @ self._alpha_r

    def predict_all(self, z, chunk=8192):
        """``(s_hat, r_hat, sigma)`` at inputs ``z``, sharing the kernel evaluations."""
        self._require_fitted()
        z = np.atleast_2d(z)
        m = len(z)
        if self.n == 0:
            return np.zeros(m), np.zeros(m), np.full(m, math.sqrt(self.kernel.amplitude))
        s, r, var = np.empty(m), np.empty(m), np.empty(m)
        for lo in range(0, m, chunk):
            kz = self.kernel(z[lo:lo + chunk], self.inputs)
            s[lo:lo + chunk] = kz @ self._alpha_s
            r[lo:lo + chunk] = kz @ self._alpha_r
            half = self._factor.half_solve(kz.T)
            var[lo:lo + chunk] = self.kernel.amplitude - np.einsum("ij,ij->j", half, half)
        return s, r, np.sqrt(self._check_var(var))

    def predictive_var(self, z, chunk=8192):
        """``k(z, z) - k_z^T (K + N lambda I)^{-1} k_z``, clamped at zero."""
        self._require_fitted()
        z = np.atleast_2d(z)
        if self.n == 0:
            return np.full(len(z), float(self.kernel.amplitude))
        var = np.empty(len(z))
        for lo in range(0, len(z), chunk):
            half = self._factor.half_solve(self.kernel(z[lo:lo + chunk], self.inputs).T)
            var[lo:lo + chunk] = self.kernel.amplitude - np.einsum("ij,ij->j", half, half)
        return self._check_var(var)

    @staticmethod
    def _check_var(var):
        if np.any(var < -1e-10):
            raise NumericalDegeneracyError(f"negative predictive variance {var.min():.3e}")
        return np.clip(var, 0.0, None)

    def predictive_std(self, z):
        return np.sqrt(self.predictive_var(z))

    def density_weights(self, z):
        """Weights ``alpha(z) = (K + N lambda I)^{-1} k(z)`` of the density map, ``(M, N)``."""
        self._require_fitted()
        z = np.atleast_2d(z)
        if self.n == 0:
            return np.zeros((len(z), 0))
        return self._kde_factor.solve(self.kde_kernel(z, self.inputs).T).T

    def predict_density(self, z, x):
        """Predicted density at one kernel input ``z`` and positions ``x`` (``(M, n)``)."""
        w = self.density_weights(np.asarray(z, dtype=float).reshape(1, -1))[0]
        x = np.asarray(x, dtype=float)
        if self.n == 0:
            return np.zeros(len(np.atleast_2d(x)))
        pts = x.reshape(-1, self.kdes[0].dim)
        out = np.zeros(len(pts))
        for wi, kde in zip(w, self.kdes):
            out += wi * kde_density(kde, pts)
        return out

    def predict_densities(self, z, x):
        """Predicted densities at several kernel inputs, shape ``(M, len(x))``.

        Each stored KDE is evaluated on ``x`` once, so this is much cheaper
        than repeated :meth:`predict_density` calls on a shared grid.
        """
        w = self.density_weights(np.atleast_2d(np.asarray(z, dtype=float)))
        x = np.asarray(x, dtype=float)
        if self.n == 0:
            return np.zeros((len(w), len(np.atleast_2d(x))))
        pts = x.reshape(-1, self.kdes[0].dim)
        basis = np.stack([kde_density(kde, pts) for kde in self.kdes])
        return w @ basis

    def information_gain(self) -> float:
        return information_gain(self)


def fit(model: KernelModel) -> KernelModel:
    return model.fit()


def add_point(model: KernelModel, point: ControlPoint, obs: ObservationRecord) -> KernelModel:
    """Add the observation made at ``point`` and refit (``lambda = 1/N`` by default)."""
    z = model.embed(np.asarray(point.theta)[None], point.t)[0]
    return model.add(z, obs.s_hat, obs.r_hat, obs.kde, point)


def predict_safety(model: KernelModel, theta, t):
    out = model.predict_safety(model.embed(theta, t))
    return float(out[0]) if out.size == 1 else out


def predict_reset(model: KernelModel, theta, t):
    out = model.predict_reset(model.embed(theta, t))
    return float(out[0]) if out.size == 1 else out


def predictive_std(model: KernelModel, theta, t):
    out = model.predictive_std(model.embed(theta, t))
    return float(out[0]) if out.size == 1 else out


def predict_density(model: KernelModel, theta, t, x):
    return model.predict_density(model.embed(theta, t)[0], x)


@dataclass(frozen=True)
class ConfidenceParams:
    beta_s: float
    beta_r: float
    beta_p: float

    def __post_init__(self):
        if min(self.beta_s, self.beta_r, self.beta_p) < 0:
            raise ConfigurationError("confidence multipliers must be nonnegative")


def confidence_params(model: KernelModel, config) -> ConfidenceParams:
    """Confidence multipliers ``beta`` for the three maps.

    ``config.beta_mode == "constant"`` returns ``beta_collect`` for safety
    and reset (and ``beta_p``, defaulting to the same value).  The
    ``"theoretical"`` mode returns ``lambda^{-1} N^{-1/2} err + B`` with the
    supplied RKHS-norm bounds ``B`` and target-error proxy ``err`` (default
    ``N^{-1/2}``).
    """
    mode = getattr(config, "beta_mode", "constant")
    if mode == "constant":
        beta = float(getattr(config, "beta_collect", 2.0))
        beta_s, beta_r, beta_p = (
            beta if getattr(config, name, None) is None else float(getattr(config, name))
            for name in ("beta_s", "beta_r", "beta_p"))
        for v in (beta, beta_s, beta_r, beta_p):
            if v < 0:
                raise ConfigurationError("beta values must be nonnegative")
        return ConfidenceParams(beta_s, beta_r, beta_p)
    if mode != "theoretical":
        raise ConfigurationError(f"unknown beta_mode {mode!r}")
    bounds = [float(getattr(config, f"beta_norm_{k}", 1.0)) for k in "srp"]
    proxy = getattr(config, "beta_error_proxy", None)
    if min(bounds) < 0 or (proxy is not None and float(proxy) < 0):
        raise ConfigurationError("norm bounds and error proxy must be nonnegative")
    n = model.n
    if n == 0:
        return ConfidenceParams(*bounds)
    err = n ** -0.5 if proxy is None else float(proxy)
    term = err / (model.lambda_value() * math.sqrt(n))
    return ConfidenceParams(*(term + b for b in bounds))


def information_gain(model: KernelModel) -> float:
    """Cumulative ``(1/2) sum_i log(1 + sigma_i^2 / (lambda N))``.

    ``sigma_i^2`` is the variance at the i-th input just before it was added;
    ``lambda N`` is 1 under the default policy.
    """
    if not model.prior_var:
        return 0.0
    ridge = model.ridge() if model.n else 1.0
    return float(0.5 * np.sum(np.log1p(np.asarray(model.prior_var) / ridge)))
