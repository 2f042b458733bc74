"""Flow matching with a sparsely supervised (masked) regression loss.

The velocity network is a plain MLP on the flattened image concatenated
with sinusoidal time features. Gradients are hand-written reverse-mode
passes over the cached activations, so the same machinery serves the
parameter gradients of the loss and the input Jacobian rows used by the
sensitivity statistics.

Linear probability path: ``z_t = (1 - t) x0 + t x1`` with ``x0 ~ N(0, I)``
at ``t = 0`` and data at ``t = 1``; the regression target is ``x1 - x0``.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .masking import MaskConfig, sample_masks
from .numerics import RngStream

__all__ = [
    "VelocityModel",
    "TrainingBatch",
    "SSDLossConfig",
    "AdamState",
    "TrainingDiverged",
    "TrainResult",
    "make_batch",
    "ssd_loss",
    "adam_update",
    "train",
]

log = logging.getLogger(__name__)


def _silu(x):
    """SiLU and the sigmoid it used (kept for the reverse pass)."""
    s = expit(x)
    return x * s, s


def _silu_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


class VelocityModel:
    """MLP velocity field ``v(z, t)`` with SiLU hidden activations.

    ``weights[l]`` has shape ``(fan_in, fan_out)``; the first layer sees
    ``dim + 2 * time_freqs`` inputs. With ``zero_final=True`` every output
    map starts at zero, so the initial network output is identically zero.

    Optional parts, all off by default:

    ``skip``
        a dense ``dim x dim`` linear map of ``z`` added to the output.
    ``local_hidden`` (with ``image_shape``)
        a small convolutional branch shared across pixels: a 3x3 patch of
        the (scaled) input plus the time features feed ``local_hidden``
        SiLU units, read out by a 1x1 map to one value per pixel. It is
        added to the MLP output and supplies a cheap per-pixel nonlinearity
        that a dense layer of modest width cannot express for every pixel.
    ``sigma_data``
        output preconditioning. The network ``F`` (MLP plus local branch)
        is wrapped as ``v = c_skip(t) z + c_out(t) F(c_in(t) z, t)``, where
        ``c_skip`` is the exact velocity for isotropic data with per-pixel
        second moment ``s = sigma_data**2`` and ``c_in``, ``c_out`` give
        ``F`` unit-variance inputs and targets under that same model. All
        three stay bounded on ``[0, 1]``, so ``t = 1`` can be evaluated.
    """

    def __init__(
        self,
        dim: int,
        hidden: Sequence[int] = (256, 256),
        time_freqs: int = 8,
        rng: RngStream | None = None,
        zero_final: bool = True,
        skip: bool = False,
        sigma_data: float | None = None,
        local_hidden: int = 0,
        image_shape: tuple[int, int] | None = None,
    ):
        self.dim = int(dim)
        self.skip = bool(skip)
        if sigma_data is not None and not sigma_data > 0.0:
            raise ValueError(f"sigma_data must be positive, got {sigma_data}")
        self.sigma_data = None if sigma_data is None else float(sigma_data)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_freqs = int(time_freqs)
        self.local_hidden = int(local_hidden)
        if self.local_hidden < 0:
            raise ValueError("local_hidden must be >= 0")
        self.image_shape: tuple[int, int] | None = None
        if self.local_hidden:
            if image_shape is None or image_shape[0] * image_shape[1] != self.dim:
                raise ValueError(f"local branch needs an image_shape with {self.dim} pixels, got {image_shape}")
            self.image_shape = (int(image_shape[0]), int(image_shape[1]))
        n_time = 2 * self.time_freqs
        sizes = [self.dim + n_time, *self.hidden, self.dim]
        rng = rng or RngStream(0)

        def init(fan_in, shape, zero):
            bound = 1.0 / math.sqrt(fan_in)
            return np.zeros(shape) if zero else rng.uniform(shape, -bound, bound)

        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            zero = zero_final and i == len(sizes) - 2
            self.weights.append(init(fan_in, (fan_in, fan_out), zero))
            self.biases.append(init(fan_in, fan_out, zero))
        self.skip_weight: np.ndarray | None = init(self.dim, (self.dim, self.dim), zero_final) if self.skip else None
        self.local: list[np.ndarray] = []
        if self.local_hidden:
            k = self.local_hidden
            self.local = [
                init(9 + n_time, (9 + n_time, k), False),  # patch and time -> units
                init(9 + n_time, k, False),
                init(k, (k, 1), zero_final),  # units -> pixel
                init(k, 1, zero_final),
            ]

    @property
    def params(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: W0, b0, W1, b1, ..., [W_skip], [local]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        if self.skip:
            out.append(self.skip_weight)
        out.extend(self.local)
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        params = [np.array(p, dtype=np.float64) for p in params]
        current = self.params
        if len(params) != len(current):
            raise ValueError(f"expected {len(current)} parameter arrays, got {len(params)}")
        for i, (p, c) in enumerate(zip(params, current)):
            if p.shape != c.shape:
                raise ValueError(f"parameter {i} has shape {p.shape}, expected {c.shape}")
        n = len(self.weights)
        self.weights = params[0 : 2 * n : 2]
        self.biases = params[1 : 2 * n : 2]
        rest = params[2 * n :]
        if self.skip:
            self.skip_weight = rest.pop(0)
        self.local = rest

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "VelocityModel":
        return copy.deepcopy(self)

    def time_features(self, t: np.ndarray) -> np.ndarray:
        freqs = (2.0 ** np.arange(self.time_freqs)) * math.pi
        arg = np.asarray(t, dtype=np.float64)[:, None] * freqs
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)

    def preconditioning(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(c_in, c_skip, c_out)`` at times ``t``; identity when disabled."""
        t = np.asarray(t, dtype=np.float64)
        if self.sigma_data is None:
            one = np.ones_like(t)
            return one, np.zeros_like(t), one
        s = self.sigma_data**2
        var_z = (1.0 - t) ** 2 + t * t * s
        return 1.0 / np.sqrt(var_z), (t * s - (1.0 - t)) / var_z, np.sqrt(s / var_z)

    def _prepare(self, z, t):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z = np.atleast_2d(z)
        if z.shape[1] != self.dim:
            raise ValueError(f"expected input dim {self.dim}, got {z.shape[1]}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
        return z, t, single

    def _patches(self, x: np.ndarray) -> np.ndarray:
        """``(B, d)`` -> ``(B, d, 9)`` zero-padded 3x3 neighbourhoods."""
        h, w = self.image_shape
        padded = np.pad(x.reshape(-1, h, w), ((0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
        return win.reshape(x.shape[0], self.dim, 9)

    def _unpatch(self, g: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`_patches`: ``(B, d, 9)`` -> ``(B, d)``."""
        h, w = self.image_shape
        g = g.reshape(-1, h, w, 3, 3)
        out = np.zeros((g.shape[0], h + 2, w + 2))
        for dy in range(3):
            for dx in range(3):
                out[:, dy : dy + h, dx : dx + w] += g[:, :, :, dy, dx]
        return out[:, 1:-1, 1:-1].reshape(g.shape[0], self.dim)

    def forward(self, z, t, cache: bool = False):
        """Velocity for ``z`` of shape ``(d,)`` or ``(B, d)`` at time(s) ``t``."""
        z, t, single = self._prepare(z, t)
        c_in, c_skip, c_out = self.preconditioning(t)
        x = z * c_in[:, None]
        tf = self.time_features(t)
        h = np.concatenate([x, tf], axis=1)
        acts = [h]
        pre = []
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if i < n_layers - 1:
                h, sig = _silu(a)
                pre.append((a, sig))
                acts.append(h)
            else:
                h = a
        local = None
        if self.local_hidden:
            w1, b1, w2, b2 = self.local
            patches = self._patches(x)
            a = patches @ w1[:9] + (tf @ w1[9:] + b1)[:, None, :]
            units, sig = _silu(a)
            h = h + units @ w2[:, 0] + b2[0]
            local = (patches, a, sig, units, tf)
        if self.sigma_data is not None:
            h = c_skip[:, None] * z + c_out[:, None] * h
        if self.skip:
            h = h + z @ self.skip_weight
        out = h[0] if single else h
        if cache:
            return out, (z, acts, pre, local, (c_in, c_skip, c_out))
        return out

    __call__ = forward

    def backward(self, cache, grad_out: np.ndarray, want_params: bool = True):
        """Reverse pass. Returns ``(param_grads, grad_z)``.

        ``grad_out`` is the cotangent of the ``(B, d)`` output. ``param_grads``
        follows :attr:`params` order (``None`` if not requested).
        """
        z, acts, pre, local, (c_in, c_skip, c_out) = cache
        g_out = np.atleast_2d(grad_out)
        g_net = g_out * c_out[:, None] if self.sigma_data is not None else g_out
        g = g_net
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            if want_params:
                grads_w[i] = acts[i].T @ g
                grads_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * _silu_grad(*pre[i - 1])
        grad_x = g[:, : self.dim]
        local_grads = []
        if self.local_hidden:
            w1, b1, w2, b2 = self.local
            patches, a, sig, units, tf = local
            ga = (g_net[:, :, None] * w2[:, 0]) * _silu_grad(a, sig)
            grad_x = grad_x + self._unpatch(ga @ w1[:9].T)
            if want_params:
                ga_sum = ga.sum(axis=1)
                k = self.local_hidden
                gw1 = np.concatenate([patches.reshape(-1, 9).T @ ga.reshape(-1, k), tf.T @ ga_sum], axis=0)
                gw2 = units.reshape(-1, k).T @ g_net.reshape(-1, 1)
                local_grads = [gw1, ga_sum.sum(axis=0), gw2, np.array([g_net.sum()])]
        grad_z = grad_x * c_in[:, None]
        if self.sigma_data is not None:
            grad_z = grad_z + c_skip[:, None] * g_out
        if self.skip:
            grad_z = grad_z + g_out @ self.skip_weight.T
        if not want_params:
            return None, grad_z
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out.extend((gw, gb))
        if self.skip:
            out.append(z.T @ g_out)
        out.extend(local_grads)
        return out, grad_z

    def input_jacobian_row(self, z: np.ndarray, t, q: int) -> np.ndarray:
        """``d v_q / d z`` for each row of ``z``; shape ``(B, d)``."""
        z2 = np.atleast_2d(z)
        _, cache = self.forward(z2, t, cache=True)
        cot = np.zeros((z2.shape[0], self.dim))
        cot[:, q] = 1.0
        _, gz = self.backward(cache, cot, want_params=False)
        return gz


@dataclass
class TrainingBatch:
    x1: np.ndarray
    x0: np.ndarray
    t: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        n = self.x1.shape[0]
        if not (self.x0.shape[0] == self.t.shape[0] == self.masks.shape[0] == n):
            raise ValueError("batch components differ in length")

    @property
    def z(self) -> np.ndarray:
        t = self.t[:, None]
        return (1.0 - t) * self.x0 + t * self.x1

    @property
    def target(self) -> np.ndarray:
        return self.x1 - self.x0


@dataclass(frozen=True)
class SSDLossConfig:
    eta: float = 0.0
    normalize_by_unmasked: bool = True

    def __post_init__(self):
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")


def make_batch(rng: RngStream, x1: np.ndarray, eta: float) -> TrainingBatch:
    """Noise, times and (nonempty) masks for a batch of data ``x1``."""
    n, d = x1.shape
    x0 = rng.normal((n, d))
    t = rng.uniform(n)
    masks = sample_masks(rng, MaskConfig(eta, d), n)
    return TrainingBatch(x1=x1, x0=x0, t=t, masks=masks)


def ssd_loss(model: VelocityModel, batch: TrainingBatch, cfg: SSDLossConfig, grads: bool = True):
    """Masked flow-matching loss and its parameter gradients.

    Per sample the squared residual is summed over unmasked coordinates
    only (divided by their count when ``normalize_by_unmasked``); the batch
    loss is the mean over samples. Returns ``(loss, grads)``.
    """
    out, cache = model.forward(batch.z, batch.t, cache=True)
    m = batch.masks.astype(np.float64)
    r = (out - batch.target) * m
    per_sample = np.sum(r * r, axis=1)
    b = out.shape[0]
    if cfg.normalize_by_unmasked:
        counts = m.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError("batch contains an all-masked sample")
        weight = 1.0 / (counts * b)
    else:
        weight = np.full(b, 1.0 / b)
    loss = float(np.sum(per_sample * weight))
    if not grads:
        return loss, None
    grad_out = 2.0 * r * weight[:, None]
    pgrads, _ = model.backward(cache, grad_out)
    return loss, pgrads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def init_for(self, model: VelocityModel) -> "AdamState":
        self.m = [np.zeros_like(p) for p in model.params]
        self.v = [np.zeros_like(p) for p in model.params]
        self.step = 0
        return self


def adam_update(model: VelocityModel, grads: list[np.ndarray], opt: AdamState) -> None:
    if not opt.m:
        opt.init_for(model)
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    new = []
    for p, g, m, v in zip(model.params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        new.append(p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.epsilon))
    model.set_params(new)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, detail: str = ""):
        super().__init__(f"non-finite loss {loss} at step {step}{': ' + detail if detail else ''}")
        self.step = step
        self.loss = loss


@dataclass
class TrainResult:
    model: VelocityModel
    epoch_loss: list[float]
    steps: int


def train(
    model: VelocityModel,
    dataset: np.ndarray,
    cfg: SSDLossConfig,
    opt: AdamState,
    epochs: int,
    batch_size: int,
    rng: RngStream,
    log_every: int = 0,
) -> TrainResult:
    """Adam on the masked loss; returns a trained copy of ``model``.

    Each epoch visits the dataset once in a fresh random order; every batch
    draws its own noise, times and masks from ``rng``. Deterministic for a
    fixed stream and dataset order.
    """
    data = np.asarray(dataset, dtype=np.float64).reshape(len(dataset), -1)
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if data.shape[1] != model.dim:
        raise ValueError(f"dataset dim {data.shape[1]} != model dim {model.dim}")
    model = model.copy()
    if not opt.m:
        opt.init_for(model)
    n = data.shape[0]
    trace = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = make_batch(rng, data[idx], cfg.eta)
            loss, grads = ssd_loss(model, batch, cfg)
            step += 1
            if not math.isfinite(loss):
                gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
                raise TrainingDiverged(step, loss, f"epoch {epoch + 1}, grad norm {gnorm:.3e}")
            adam_update(model, grads, opt)
            total += loss * len(idx)
            count += len(idx)
        trace.append(total / count)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.6f", epoch + 1, trace[-1])
    return TrainResult(model=model, epoch_loss=trace, steps=step)
