"""Deterministic ODE samplers for a velocity field ``v(z, t)``.

Integration runs from the prior at ``t = 0`` to data at ``t = 1``. A
velocity oracle is any callable ``v(z, t) -> array`` accepting a batch
``z`` of shape ``(B, d)`` and a scalar time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import RngStream

__all__ = [
    "TimeGrid",
    "SampleRun",
    "NonFiniteVelocity",
    "euler_step",
    "heun2_sample",
    "euler_sample",
    "batch_generate",
    "prior_noise",
]

Velocity = Callable[[np.ndarray, float], np.ndarray]


class NonFiniteVelocity(FloatingPointError):
    def __init__(self, t: float):
        super().__init__(f"velocity field returned non-finite values at t={t:.6g}")
        self.t = t


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("time grid needs at least two points")
        if times[0] != 0.0 or times[-1] != 1.0:
            raise ValueError("time grid must start at 0 and end at 1")
        if np.any(np.diff(times) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, intervals: int = 25) -> "TimeGrid":
        return cls(np.linspace(0.0, 1.0, intervals + 1))

    @property
    def intervals(self) -> int:
        return self.times.size - 1

    def nfe(self, method: str = "heun", final_euler: bool = False) -> int:
        if method == "euler":
            return self.intervals
        return 2 * self.intervals - (1 if final_euler else 0)


class _Counted:
    def __init__(self, v: Velocity):
        self.v = v
        self.calls = 0

    def __call__(self, z, t):
        self.calls += 1
        out = np.asarray(self.v(z, t), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteVelocity(t)
        return out


def euler_step(v: Velocity, z: np.ndarray, t: float, h: float) -> np.ndarray:
    if h <= 0 or t + h > 1.0 + 1e-12:
        raise ValueError(f"invalid step t={t}, h={h}")
    vel = np.asarray(v(z, t), dtype=np.float64)
    if not np.all(np.isfinite(vel)):
        raise NonFiniteVelocity(t)
    return z + h * vel


def _integrate(v, z0, grid, method, final_euler, snapshot_times):
    counted = _Counted(v)
    z = np.array(z0, dtype=np.float64)
    times = grid.times
    snaps = {}
    wanted = _snapshot_index(grid, snapshot_times)
    if 0 in wanted:
        snaps[0] = z.copy()
    for k in range(grid.intervals):
        t, t_next = times[k], times[k + 1]
        h = t_next - t
        d0 = counted(z, t)
        pred = z + h * d0
        last = k == grid.intervals - 1
        if method == "euler" or (final_euler and last):
            z = pred
        else:
            d1 = counted(pred, t_next)
            z = z + 0.5 * h * (d0 + d1)
        if k + 1 in wanted:
            snaps[k + 1] = z.copy()
    return z, counted.calls, [snaps[i] for i in sorted(wanted)]


def _snapshot_index(grid: TimeGrid, snapshot_times) -> set[int]:
    out = set()
    for s in snapshot_times or ():
        hits = np.flatnonzero(np.abs(grid.times - s) <= 1e-12)
        if hits.size == 0:
            raise ValueError(f"snapshot time {s} is not a grid point")
        out.add(int(hits[0]))
    return out


def heun2_sample(v: Velocity, z0: np.ndarray, grid: TimeGrid, final_euler: bool = False) -> tuple[np.ndarray, int]:
    """Heun's second-order method; returns ``(terminal, nfe)``.

    Each interval takes an Euler predictor and averages the slopes at both
    ends. ``final_euler`` replaces the last corrector with the plain
    predictor, saving one evaluation.
    """
    z, nfe, _ = _integrate(v, z0, grid, "heun", final_euler, ())
    return z, nfe


def euler_sample(v: Velocity, z0: np.ndarray, grid: TimeGrid) -> tuple[np.ndarray, int]:
    z, nfe, _ = _integrate(v, z0, grid, "euler", False, ())
    return z, nfe


@dataclass
class SampleRun:
    initial: np.ndarray
    terminal: np.ndarray
    snapshot_times: list[float] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)  # each (n, d)
    nfe: int = 0


def prior_noise(seed: int, indices: Sequence[int], dim: int) -> np.ndarray:
    """Row ``i`` is drawn from its own stream ``(seed, i)``.

    A sample's noise therefore depends only on its index, so two models
    sampled with the same seed start from identical points.
    """
    return np.stack([RngStream(seed, int(i)).normal(dim) for i in indices]) if len(indices) else np.zeros((0, dim))


def batch_generate(
    v: Velocity,
    n: int,
    dim: int,
    grid: TimeGrid,
    seed: int,
    snapshot_times: Sequence[float] = (),
    method: str = "heun",
    final_euler: bool = False,
    chunk: int = 256,
    executor=None,
) -> SampleRun:
    """Integrate ``n`` prior samples in fixed-size chunks.

    Chunk boundaries do not depend on the executor, so the output is the
    same whether chunks run serially or on a thread pool.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if method not in ("heun", "euler"):
        raise ValueError(f"unknown method {method!r}")
    snap_idx = sorted(_snapshot_index(grid, snapshot_times))
    starts = list(range(0, n, chunk))

    def work(start):
        idx = range(start, min(start + chunk, n))
        z0 = prior_noise(seed, idx, dim)
        z, nfe, snaps = _integrate(v, z0, grid, method, final_euler, snapshot_times)
        return z0, z, nfe, snaps

    results = list(executor.map(work, starts)) if executor is not None else [work(s) for s in starts]
    initial = np.concatenate([r[0] for r in results])
    terminal = np.concatenate([r[1] for r in results])
    snaps = [np.concatenate([r[3][j] for r in results]) for j in range(len(snap_idx))]
    return SampleRun(
        initial=initial,
        terminal=terminal,
        snapshot_times=[float(grid.times[i]) for i in snap_idx],
        snapshots=snaps,
        nfe=results[0][2],
    )
