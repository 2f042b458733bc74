"""Bernoulli pixel masks and their effect on a Gaussian covariance.

Throughout the package ``eta`` is the probability that a coordinate is
*masked* (dropped from the loss), so ``P(m_j = 1) = 1 - eta``.

Masking ``x ~ N(0, S)`` elementwise scales the diagonal of ``S`` by
``1 - eta`` and every off-diagonal entry by ``(1 - eta)**2``::

    S_masked = (1 - eta)**2 * S + eta * (1 - eta) * diag(S)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import CovarianceModel, RngStream

__all__ = [
    "MaskConfig",
    "SpectrumReport",
    "CovarianceModel",
    "sample_mask",
    "sample_mask_nonempty",
    "sample_masks",
    "masked_covariance",
    "spectrum_report",
    "BETA_UNDEFINED",
]

# Sentinel for directions with (numerically) zero variance; real ratios are >= 0.
BETA_UNDEFINED = -1.0
_LAMBDA_FLOOR = 1e-12
_RESAMPLE_CAP = 10**6


@dataclass(frozen=True)
class MaskConfig:
    eta: float
    dim: int

    def __post_init__(self):
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")


def sample_mask(rng: RngStream, cfg: MaskConfig) -> np.ndarray:
    """One mask of ``uint8`` bits, each 1 with probability ``1 - eta``."""
    return (rng.uniform(cfg.dim) >= cfg.eta).astype(np.uint8)


def sample_mask_nonempty(rng: RngStream, cfg: MaskConfig) -> np.ndarray:
    """Like :func:`sample_mask` but redraws until at least one bit is set."""
    for _ in range(_RESAMPLE_CAP):
        m = sample_mask(rng, cfg)
        if m.any():
            return m
    raise RuntimeError(f"no nonempty mask after {_RESAMPLE_CAP} draws (eta={cfg.eta}, dim={cfg.dim})")


def sample_masks(rng: RngStream, cfg: MaskConfig, n: int, nonempty: bool = True) -> np.ndarray:
    """``n`` masks as an ``(n, dim)`` array.

    Draws a whole block at once and only redraws the all-zero rows, which
    is much cheaper than ``n`` separate calls when ``dim`` is large.
    """
    masks = (rng.uniform((n, cfg.dim)) >= cfg.eta).astype(np.uint8)
    if not nonempty or cfg.eta == 0.0:
        return masks
    for _ in range(_RESAMPLE_CAP):
        empty = np.flatnonzero(~masks.any(axis=1))
        if empty.size == 0:
            return masks
        masks[empty] = (rng.uniform((empty.size, cfg.dim)) >= cfg.eta).astype(np.uint8)
    raise RuntimeError(f"no nonempty mask after {_RESAMPLE_CAP} draws (eta={cfg.eta}, dim={cfg.dim})")


def masked_covariance(cov: CovarianceModel | np.ndarray, eta: float) -> np.ndarray:
    """Covariance of ``m * x`` for ``x ~ N(0, sigma)`` and Bernoulli masks."""
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    sigma = cov.sigma if isinstance(cov, CovarianceModel) else np.asarray(cov, dtype=np.float64)
    keep = 1.0 - eta
    out = keep * keep * sigma
    out[np.diag_indices_from(out)] = keep * np.diag(sigma)
    return out


@dataclass(frozen=True)
class SpectrumReport:
    """Per-eigendirection variance before and after masking.

    ``beta[i]`` is :data:`BETA_UNDEFINED` (-1) where ``lambda_[i]`` is
    below 1e-12; ``defined`` flags the usable entries.
    """

    lambda_: np.ndarray
    lambda_tilde: np.ndarray
    beta: np.ndarray
    defined: np.ndarray
    diag_energy: np.ndarray  # u_i^T D u_i

    def order(self) -> np.ndarray:
        """Direction indices sorted by descending ``beta`` (undefined last)."""
        return np.argsort(-self.beta, kind="stable")


def spectrum_report(cov: CovarianceModel, eta: float) -> SpectrumReport:
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    lam = cov.eig.eigenvalues
    u = cov.eig.eigenvectors
    d = np.diag(cov.sigma)
    diag_energy = (u * u).T @ d
    keep = 1.0 - eta
    lam_tilde = keep * keep * lam + eta * keep * diag_energy
    defined = lam > _LAMBDA_FLOOR
    beta = np.full_like(lam, BETA_UNDEFINED)
    beta[defined] = lam_tilde[defined] / lam[defined]
    return SpectrumReport(lam.copy(), lam_tilde, beta, defined, diag_energy)
