"""Dense linear algebra and counter-based random streams shared by the lab.

Matrices and vectors are plain ``float64`` numpy arrays. The few routines
here add the checks and conventions the rest of the package relies on:
descending, sign-normalised eigendecompositions, pivot-aware inversion and
reproducible per-stream random draws.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "NumericsError",
    "ConvergenceError",
    "SingularMatrixError",
    "EigenDecomposition",
    "CovarianceModel",
    "RngStream",
    "mix64",
    "sym_eig",
    "jacobi_eigh",
    "gaussian_sample",
    "mat_inverse",
    "l2_distance",
]

_MASK64 = (1 << 64) - 1

# Above this size the cyclic Jacobi sweep is handed to LAPACK (dsyevd).
JACOBI_MAX_DIM = 128


class NumericsError(ValueError):
    """Invalid numerical input (non-finite, non-symmetric, wrong shape)."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class SingularMatrixError(NumericsError):
    def __init__(self, message: str, pivot: float):
        super().__init__(f"{message}; smallest pivot {pivot:.3e}")
        self.pivot = pivot


def mix64(x: int) -> int:
    """SplitMix64 finaliser; used to derive stream ids."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """A Philox-4x64 stream keyed by ``(seed, stream_id)``.

    Philox is counter based: the key selects an independent sequence and the
    counter indexes into it, so workers can draw from distinct stream ids
    without sharing state. A stream is single-owner; do not share one across
    threads.
    """

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        if counter:
            bitgen = bitgen.advance(int(counter))
        self.generator = np.random.Generator(bitgen)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    @property
    def counter(self) -> int:
        """Number of 256-bit Philox blocks consumed so far."""
        state = self.generator.bit_generator.state["state"]["counter"]
        return int(state[0]) | (int(state[1]) << 64)

    def derive(self, sub: int) -> "RngStream":
        """Independent child stream, a pure function of (seed, stream_id, sub)."""
        return RngStream(self.seed, mix64(self.stream_id ^ mix64(int(sub) & _MASK64)))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues in descending order; eigenvectors are the columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


def _check_square(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NumericsError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericsError(f"{name} has non-finite entries")
    return m


def _round_robin(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for a round-robin tournament over ``m`` (even) players."""
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p = np.array([players[i] for i in range(m // 2)])
        q = np.array([players[m - 1 - i] for i in range(m // 2)])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _off_norm(a: np.ndarray) -> float:
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.linalg.norm(off))


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigensolver with tournament ordering.

    Each round annihilates ``n/2`` disjoint off-diagonal pairs at once, so
    a sweep costs ``n - 1`` vectorised rotations instead of ``n(n-1)/2``
    scalar ones. Returns unsorted ``(eigenvalues, eigenvectors)``.
    """
    n = a.shape[0]
    m = n + (n % 2)
    work = np.zeros((m, m))
    work[:n, :n] = a
    v = np.eye(m)
    rounds = _round_robin(m)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = _off_norm(work)
        if off <= tol * scale:
            return np.diag(work)[:n].copy(), v[:n, :n].copy()
        for p, q in rounds:
            apq = work[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            safe = np.where(active, apq, 1.0)
            tau = (work[q, q] - work[p, p]) / (2.0 * safe)
            sgn = np.where(tau >= 0.0, 1.0, -1.0)
            # hypot avoids overflow of tau**2 when apq is negligible
            t = np.where(active, sgn / (np.abs(tau) + np.hypot(1.0, tau)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            cols_p, cols_q = work[:, p].copy(), work[:, q].copy()
            work[:, p] = cols_p * c - cols_q * s
            work[:, q] = cols_p * s + cols_q * c
            rows_p, rows_q = work[p, :].copy(), work[q, :].copy()
            work[p, :] = c[:, None] * rows_p - s[:, None] * rows_q
            work[q, :] = s[:, None] * rows_p + c[:, None] * rows_q
            work[p, q] = 0.0
            work[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
    off = _off_norm(work)
    raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps", off / scale)


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > 1e-10 * max(1.0, np.max(np.abs(m), initial=0.0)):
        raise NumericsError(f"matrix is not symmetric (max |M - M^T| = {asym:.3e})")
    return m


def sym_eig(m: np.ndarray, method: str = "auto") -> EigenDecomposition:
    """Eigendecomposition of a real symmetric matrix.

    ``method`` is ``"jacobi"``, ``"lapack"`` or ``"auto"`` (Jacobi up to
    :data:`JACOBI_MAX_DIM`). Eigenvalues come back in descending order and
    each eigenvector is signed so its largest-magnitude entry is positive,
    which makes the output independent of the backend.
    """
    m = _check_symmetric(_check_square(m))
    m = 0.5 * (m + m.T)
    if method == "auto":
        method = "jacobi" if m.shape[0] <= JACOBI_MAX_DIM else "lapack"
    if method == "jacobi":
        w, v = jacobi_eigh(m)
    elif method == "lapack":
        w, v = np.linalg.eigh(m)
    else:
        raise ValueError(f"unknown method {method!r}")
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    if v.size:
        pivot = np.argmax(np.abs(v), axis=0)
        signs = np.where(v[pivot, np.arange(v.shape[1])] < 0, -1.0, 1.0)
        v = v * signs
    return EigenDecomposition(eigenvalues=w, eigenvectors=v)


@dataclass(frozen=True)
class CovarianceModel:
    """A symmetric PSD covariance with its eigendecomposition cached."""

    sigma: np.ndarray
    eig: EigenDecomposition = field(repr=False)

    @classmethod
    def from_matrix(cls, sigma, method: str = "auto") -> "CovarianceModel":
        sigma = _check_symmetric(_check_square(sigma, "covariance"))
        sigma = 0.5 * (sigma + sigma.T)
        eig = sym_eig(sigma, method=method)
        if eig.eigenvalues.size and eig.eigenvalues[-1] < -1e-10 * max(1.0, eig.eigenvalues[0]):
            raise NumericsError(f"covariance is not PSD (smallest eigenvalue {eig.eigenvalues[-1]:.3e})")
        return cls(sigma=sigma, eig=eig)

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    def sqrt_factor(self) -> np.ndarray:
        """``U diag(sqrt(lambda))``; tiny negative eigenvalues are clamped to 0."""
        lam = np.clip(self.eig.eigenvalues, 0.0, None)
        return self.eig.eigenvectors * np.sqrt(lam)


def gaussian_sample(rng: RngStream, mean, cov: CovarianceModel, n: int) -> np.ndarray:
    """Draw ``n`` samples ``mean + U Lambda^{1/2} xi``; returns shape ``(n, d)``."""
    lam = cov.eig.eigenvalues
    if lam.size and lam.min() < -1e-10:
        raise NumericsError(f"covariance has negative eigenvalue {lam.min():.3e}")
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (cov.dim,))
    xi = rng.normal((n, cov.dim))
    return mean + xi @ cov.sqrt_factor().T


def mat_inverse(m: np.ndarray, max_condition: float = 1e12) -> np.ndarray:
    """Inverse through a pivoted LU factorisation.

    Raises :class:`SingularMatrixError` when a pivot vanishes relative to the
    matrix scale or the 2-norm condition number exceeds ``max_condition``.
    """
    m = _check_square(m)
    n = m.shape[0]
    if n == 0:
        return m.copy()
    with warnings.catch_warnings():
        # exact zero pivots are reported below with more context
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(m, check_finite=False)
    pivots = np.abs(np.diag(lu))
    smallest = float(pivots.min())
    scale = float(np.max(np.abs(m)))
    if smallest <= np.finfo(float).eps * n * scale:
        raise SingularMatrixError("matrix is singular to working precision", smallest)
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > max_condition:
        raise SingularMatrixError(f"condition number {cond:.3e} exceeds {max_condition:.0e}", smallest)
    return scipy.linalg.lu_solve((lu, piv), np.eye(n), check_finite=False)


def l2_distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))
