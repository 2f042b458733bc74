"""Closed-form denoisers, velocity oracles and their sensitivity fields.

Two families:

* the empirical optimal denoiser, a posterior-weighted average of the
  training set that can only reproduce training points;
* the Gaussian (linear) denoiser for ``x ~ N(0, Sigma)``, whose Jacobian is
  ``(1/sqrt(alpha_t)) U diag(SNR_i / (SNR_i + 1)) U^T`` with
  ``SNR_i = lambda_i**p / sigma_t**2`` (``p = 2`` by default).

Both come with velocity oracles for the linear flow path
``z_t = (1 - t) x0 + t x1`` so they can be driven through the samplers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .masking import masked_covariance
from .numerics import CovarianceModel

__all__ = [
    "EmpiricalDenoiser",
    "AnalyticDenoiser",
    "SensitivityRow",
    "optimal_denoise",
    "posterior_weights",
    "flow_path_denoiser",
    "empirical_velocity",
    "gaussian_velocity",
    "analytic_sensitivity",
    "sensitivity_row",
    "linear_denoiser_matrix",
    "masked_sensitivity_shift",
    "default_alpha",
    "default_sigma",
]

Schedule = Callable[[float], float]


def _one(t: float) -> float:
    return 1.0


def _ve_std(t: float) -> float:
    return t


@dataclass(frozen=True)
class EmpiricalDenoiser:
    """Posterior mean under ``z = signal_scale(t) x + noise_std(t) eps``.

    The defaults give the variance-exploding convention ``z = x + t eps``.
    """

    data: np.ndarray
    noise_std: Schedule = _ve_std
    signal_scale: Schedule = _one

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] == 0:
            raise ValueError("data must be a nonempty (n, d) array")
        object.__setattr__(self, "data", data)


def posterior_weights(d: EmpiricalDenoiser, z: np.ndarray, t: float) -> np.ndarray:
    """``p_t(x^i | z)`` for each row of ``z``; shape ``(B, n)``."""
    sigma = float(d.noise_std(t))
    if sigma <= 0.0:
        raise ValueError(f"noise std must be positive, got {sigma} at t={t}")
    a = float(d.signal_scale(t))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    mu = a * d.data
    sq = np.sum(z * z, axis=1)[:, None] - 2.0 * z @ mu.T + np.sum(mu * mu, axis=1)[None, :]
    logits = -0.5 * sq / (sigma * sigma)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def optimal_denoise(d: EmpiricalDenoiser, z, t: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = posterior_weights(d, z, t) @ d.data
    return out[0] if z.ndim == 1 else out


def flow_path_denoiser(data) -> EmpiricalDenoiser:
    """Denoiser matched to ``z_t = (1 - t) x0 + t x1``."""
    return EmpiricalDenoiser(data, noise_std=lambda t: 1.0 - t, signal_scale=lambda t: t)


def empirical_velocity(data, t_max: float = 1.0 - 1e-9):
    """Exact velocity field of the empirical data distribution.

    ``v(z, t) = (E[x1 | z] - z) / (1 - t)``; times are clipped to ``t_max``
    because the field is singular at ``t = 1``. Pair with a final Euler
    step to land exactly on the denoiser output.
    """
    d = flow_path_denoiser(data)

    def v(z, t):
        t = min(float(t), t_max)
        return (optimal_denoise(d, z, t) - z) / (1.0 - t)

    return v


def gaussian_velocity(cov: CovarianceModel):
    """Exact velocity of the linear path when ``x1 ~ N(0, Sigma)``.

    In the eigenbasis, ``v_i = (t lambda_i - (1 - t)) / ((1 - t)^2 + t^2 lambda_i) z_i``.
    """
    u = cov.eig.eigenvectors
    lam = np.clip(cov.eig.eigenvalues, 0.0, None)

    def v(z, t):
        t = float(t)
        gain = (t * lam - (1.0 - t)) / ((1.0 - t) ** 2 + t * t * lam)
        return ((np.asarray(z) @ u) * gain) @ u.T

    return v


def default_alpha(t: float) -> float:
    """Signal variance scale of the linear path, ``t**2``."""
    return t * t


def default_sigma(t: float) -> float:
    """Noise std of the linear path, ``1 - t``."""
    return 1.0 - t


@dataclass(frozen=True)
class AnalyticDenoiser:
    cov: CovarianceModel
    alpha: Schedule = default_alpha
    sigma: Schedule = default_sigma
    snr_power: int = 2


@dataclass(frozen=True)
class SensitivityRow:
    pixel_index: int
    row: np.ndarray

    @property
    def l1_norm(self) -> float:
        return float(np.sum(np.abs(self.row)))


def _gain(lam: np.ndarray, power: int, sigma: float) -> np.ndarray:
    # SNR / (SNR + 1) written as lam^p / (lam^p + sigma^2): finite at sigma = 0
    lp = np.clip(lam, 0.0, None) ** power
    den = lp + sigma * sigma
    return np.divide(lp, den, out=np.zeros_like(lp), where=den > 0)


def analytic_sensitivity(d: AnalyticDenoiser, t: float) -> np.ndarray:
    """Full Jacobian of the Gaussian denoiser at time ``t``."""
    alpha = float(d.alpha(t))
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha} at t={t}")
    sigma = float(d.sigma(t))
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    u = d.cov.eig.eigenvectors
    g = _gain(d.cov.eig.eigenvalues, d.snr_power, sigma)
    return (u * g) @ u.T / np.sqrt(alpha)


def sensitivity_row(d: AnalyticDenoiser, t: float, q: int) -> SensitivityRow:
    return SensitivityRow(pixel_index=q, row=analytic_sensitivity(d, t)[q].copy())


def linear_denoiser_matrix(d: AnalyticDenoiser, t: float) -> np.ndarray:
    """``A_t = Sigma^p (Sigma^p + sigma_t^2 I)^{-1} / sqrt(alpha_t)`` without
    any eigendecomposition; an independent route to the same Jacobian."""
    sp = np.linalg.matrix_power(d.cov.sigma, d.snr_power)
    sigma = float(d.sigma(t))
    n = sp.shape[0]
    # Sigma^p and (Sigma^p + s I)^{-1} commute, so solve from the right
    a = np.linalg.solve((sp + sigma * sigma * np.eye(n)).T, sp.T).T
    return a / np.sqrt(float(d.alpha(t)))


def masked_sensitivity_shift(
    cov: CovarianceModel,
    eta: float,
    t: float,
    alpha: Schedule = default_alpha,
    sigma: Schedule = default_sigma,
    snr_power: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians from ``Sigma`` and from its masked counterpart."""
    full = analytic_sensitivity(AnalyticDenoiser(cov, alpha, sigma, snr_power), t)
    masked_cov = CovarianceModel.from_matrix(masked_covariance(cov, eta))
    masked = analytic_sensitivity(AnalyticDenoiser(masked_cov, alpha, sigma, snr_power), t)
    return full, masked
