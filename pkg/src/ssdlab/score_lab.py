"""Score estimation for a correlated 2D Gaussian under an OU forward process.

Forward process: ``x_t = exp(-t) x_0 + sqrt(delta_t) eps`` with
``delta_t = 1 - exp(-2t)``, so ``x_t ~ N(0, Sigma_t)`` where
``Sigma_t = exp(-2t) Sigma + delta_t I`` and the population score is
``-Sigma_t^{-1} x``.

The empirical (KDE) score places a Gaussian kernel of variance
``delta_t`` at each shrunk training point ``exp(-t) x_0^(i)``. The masked
estimator repeats that computation with random coordinate masks applied
to the displacements and averages the results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .masking import MaskConfig, sample_masks
from .numerics import CovarianceModel, RngStream, gaussian_sample, mat_inverse

__all__ = [
    "Gaussian2DConfig",
    "DiffusedState",
    "GridSpec",
    "ScoreField",
    "ErrorField",
    "ScoreLabResult",
    "population_score",
    "empirical_score",
    "masked_score",
    "kde_weights",
    "draw_training_points",
    "score_error_field",
]

DATA_STREAM = 0
MASK_STREAM = 1


@dataclass(frozen=True)
class Gaussian2DConfig:
    rho: float = 0.7
    t: float = 0.1
    n_points: int = 10

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.t <= 0.0:
            raise ValueError(f"t must be positive, got {self.t}")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")

    @property
    def sigma(self) -> np.ndarray:
        return np.array([[1.0, self.rho], [self.rho, 1.0]])


@dataclass(frozen=True)
class DiffusedState:
    delta_t: float
    shrink: float
    sigma_t: np.ndarray

    @classmethod
    def at(cls, cfg: Gaussian2DConfig) -> "DiffusedState":
        shrink = math.exp(-cfg.t)
        delta = -math.expm1(-2.0 * cfg.t)
        return cls(delta_t=delta, shrink=shrink, sigma_t=shrink * shrink * cfg.sigma + delta * np.eye(2))


def population_score(cfg: Gaussian2DConfig, x) -> np.ndarray:
    """``-Sigma_t^{-1} x`` for one point ``(2,)`` or a batch ``(N, 2)``."""
    prec = mat_inverse(DiffusedState.at(cfg).sigma_t)
    x = np.asarray(x, dtype=np.float64)
    return -(x @ prec.T)


def kde_weights(sq_dist: np.ndarray, delta_t: float) -> np.ndarray:
    """Softmax of ``-d / 2`` along the last axis, ``d = sq_dist / delta_t``."""
    logits = -0.5 * sq_dist / delta_t
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def _shrunk(cfg: Gaussian2DConfig, data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64).reshape(-1, 2)
    if data.shape[0] == 0:
        raise ValueError("need at least one training point")
    return math.exp(-cfg.t) * data


def empirical_score(cfg: Gaussian2DConfig, data, x) -> np.ndarray:
    """KDE score at ``x`` (``(2,)`` or ``(N, 2)``)."""
    state = DiffusedState.at(cfg)
    xt = _shrunk(cfg, data)
    x = np.asarray(x, dtype=np.float64)
    q = np.atleast_2d(x)
    disp = xt[None, :, :] - q[:, None, :]  # (N, n, 2)
    w = kde_weights(np.sum(disp * disp, axis=-1), state.delta_t)
    out = np.einsum("qn,qnd->qd", w, disp) / state.delta_t
    return out[0] if x.ndim == 1 else out


def _masked_kde(xt: np.ndarray, q: np.ndarray, masks: np.ndarray, delta_t: float) -> np.ndarray:
    """Average masked score at one query point.

    ``masks`` is ``(k, 2)`` (one mask shared by all points per draw) or
    ``(k, n, 2)`` (an independent mask per training point).
    """
    disp = xt - q  # (n, 2)
    m = masks[:, None, :] if masks.ndim == 2 else masks
    md = m * disp[None, :, :]  # (k, n, 2)
    w = kde_weights(np.sum(md * md, axis=-1), delta_t)  # (k, n)
    per_mask = np.einsum("kn,knd->kd", w, md) / delta_t
    return per_mask.mean(axis=0)


def masked_score(
    cfg: Gaussian2DConfig,
    data,
    x,
    eta: float,
    n_masks: int,
    rng: RngStream,
    per_point: bool = False,
) -> np.ndarray:
    """KDE score averaged over ``n_masks`` random coordinate masks.

    Each draw masks a coordinate with probability ``eta``; all-zero masks
    are redrawn. By default one mask is shared by every training point in a
    draw; ``per_point=True`` gives each point its own mask. With
    ``eta == 0`` no randomness is consumed and the result equals
    :func:`empirical_score`.
    """
    if n_masks < 1:
        raise ValueError("n_masks must be >= 1")
    if eta == 0.0:
        return empirical_score(cfg, data, x)
    state = DiffusedState.at(cfg)
    xt = _shrunk(cfg, data)
    x = np.asarray(x, dtype=np.float64)
    q = np.atleast_2d(x)
    out = np.empty_like(q)
    mcfg = MaskConfig(eta, 2)
    for i in range(q.shape[0]):
        shape_n = n_masks * xt.shape[0] if per_point else n_masks
        masks = sample_masks(rng, mcfg, shape_n).astype(np.float64)
        if per_point:
            masks = masks.reshape(n_masks, xt.shape[0], 2)
        out[i] = _masked_kde(xt, q[i], masks, state.delta_t)
    return out[0] if x.ndim == 1 else out


@dataclass(frozen=True)
class GridSpec:
    lo: float = -3.0
    hi: float = 3.0
    resolution: int = 30

    def points(self) -> np.ndarray:
        """Row-major grid: ``x1`` varies fastest."""
        ax = np.linspace(self.lo, self.hi, self.resolution)
        g2, g1 = np.meshgrid(ax, ax, indexing="ij")
        return np.column_stack([g1.ravel(), g2.ravel()])


@dataclass
class ScoreField:
    grid: np.ndarray
    vectors: np.ndarray
    provenance: str


@dataclass
class ErrorField:
    grid: np.ndarray
    abs_error: np.ndarray

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.abs_error))

    @property
    def max_error(self) -> float:
        return float(np.max(self.abs_error))


@dataclass
class ScoreLabResult:
    data: np.ndarray
    population: ScoreField
    empirical: ScoreField
    masked: ScoreField
    empirical_error: ErrorField
    masked_error: ErrorField

    def summary(self) -> dict:
        return {
            "empirical": {"mean": self.empirical_error.mean_error, "max": self.empirical_error.max_error},
            "masked": {"mean": self.masked_error.mean_error, "max": self.masked_error.max_error},
        }


def draw_training_points(cfg: Gaussian2DConfig, seed: int) -> np.ndarray:
    cov = CovarianceModel.from_matrix(cfg.sigma)
    return gaussian_sample(RngStream(seed, DATA_STREAM), np.zeros(2), cov, cfg.n_points)


def _error(a: np.ndarray, b: np.ndarray, norm: str) -> np.ndarray:
    diff = a - b
    if norm == "l2":
        return np.linalg.norm(diff, axis=1)
    if norm == "l1":
        return np.sum(np.abs(diff), axis=1)
    raise ValueError(f"unknown error norm {norm!r}")


def score_error_field(
    cfg: Gaussian2DConfig,
    data,
    eta: float,
    grid_spec: GridSpec = GridSpec(),
    n_masks: int = 64,
    seed: int = 0,
    error_norm: str = "l2",
    per_point: bool = False,
    executor=None,
) -> ScoreLabResult:
    """Population, empirical and masked score fields plus their errors.

    Grid point ``g`` draws its masks from ``RngStream(seed, MASK_STREAM)
    .derive(g)``, so results do not depend on how points are scheduled.
    """
    data = np.asarray(data, dtype=np.float64).reshape(-1, 2)
    grid = grid_spec.points()
    pop = population_score(cfg, grid)
    emp = empirical_score(cfg, data, grid)
    base = RngStream(seed, MASK_STREAM)

    def one(g):
        return masked_score(cfg, data, grid[g], eta, n_masks, base.derive(g), per_point=per_point)

    idx = range(grid.shape[0])
    rows = list(executor.map(one, idx)) if executor is not None else [one(g) for g in idx]
    msk = np.array(rows).reshape(-1, 2)
    return ScoreLabResult(
        data=data,
        population=ScoreField(grid, pop, "population"),
        empirical=ScoreField(grid, emp, "empirical"),
        masked=ScoreField(grid, msk, "masked"),
        empirical_error=ErrorField(grid, _error(emp, pop, error_norm)),
        masked_error=ErrorField(grid, _error(msk, pop, error_norm)),
    )
