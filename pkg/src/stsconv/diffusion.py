"""Few-step generator-based diffusion decoder for normalised mel frames.

The denoiser predicts the clean spectrogram ``x0`` directly from
``x_t = alpha_t * x0 + sqrt(1 - alpha_t^2) * eps``; sampling alternates
prediction and re-diffusion to the next lower step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .nn import Conv1d, Linear, Module, positional_encoding
from .tensor import Tensor

__all__ = [
    "NoiseSchedule",
    "diffuse",
    "Denoiser",
    "mae_loss",
    "ssim",
    "ssim_loss",
    "sample",
]

SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if np.any(self.betas < 0) or np.any(self.betas >= 1):
            raise ValueError("every beta must lie in [0, 1)")

    @property
    def steps(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        """``alphas[t] = prod_{i<=t} sqrt(1 - beta_i)`` with ``alphas[0] = 1``."""
        return np.concatenate([[1.0], np.cumprod(np.sqrt(1.0 - self.betas))])

    def alpha(self, t: int) -> float:
        if not 0 <= t <= self.steps:
            raise ValueError(f"step {t} outside [0, {self.steps}]")
        return float(self.alphas[t])

    def snr(self) -> np.ndarray:
        a = self.alphas[1:]
        return a * a / (1.0 - a * a)

    @classmethod
    def vpsde(cls, steps: int = 4, beta_min: float = 0.1, beta_max: float = 40.0) -> "NoiseSchedule":
        """Discretised variance-preserving SDE with a linear beta(s) on s in [0, 1]."""
        s = np.arange(steps + 1) / steps
        log_abar = -0.5 * beta_min * s - 0.25 * (beta_max - beta_min) * s ** 2
        return cls(1.0 - np.exp(log_abar[1:] - log_abar[:-1]))

    @classmethod
    def linear(cls, steps: int = 4, start: float = 1e-4, end: float = 0.06) -> "NoiseSchedule":
        return cls(np.linspace(start, end, steps))


def diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """Forward-noise ``x0`` to step ``t`` (works on arrays and tensors)."""
    if not 1 <= t <= schedule.steps:
        raise ValueError(f"diffusion step {t} outside [1, {schedule.steps}]")
    a = schedule.alpha(t)
    if np.shape(eps) != np.shape(x0.data if isinstance(x0, Tensor) else x0):
        raise tn.ShapeError("noise and signal shapes differ")
    return x0 * a + eps * np.sqrt(1.0 - a * a)


def step_embedding(t: int, dim: int) -> np.ndarray:
    return positional_encoding(t + 1, dim)[t]


class Denoiser(Module):
    """Dilated gated-conv residual stack predicting clean mel frames.

    The fused condition is projected once, the step embedding is added to it,
    and every layer reads its own slice of a shared condition projection.
    """

    def __init__(self, n_mels: int, cond_dim: int, hidden: int, layers: int, rng,
                 dtype=np.float32, kernel: int = 3, dilation_cycle: int = 4):
        self.hidden, self.n_layers = hidden, layers
        self.inp = Linear(n_mels, hidden, rng, dtype)
        self.cond = Linear(cond_dim, hidden, rng, dtype)
        self.step1 = Linear(hidden, hidden * 2, rng, dtype)
        self.step2 = Linear(hidden * 2, hidden, rng, dtype)
        self.cond_all = Linear(hidden, 2 * hidden * layers, rng, dtype)
        self.dil = [Conv1d(hidden, 2 * hidden, kernel, rng, dtype, dilation=2 ** (i % dilation_cycle))
                    for i in range(layers)]
        self.res = [Linear(hidden, 2 * hidden, rng, dtype) for _ in range(layers)]
        self.skip = Linear(hidden, hidden, rng, dtype)
        self.out = Linear(hidden, n_mels, rng, dtype, zero=True)

    def __call__(self, x_t, t: int, cond: Tensor) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=cond.dtype))
        if x_t.shape[0] != cond.shape[0]:
            raise tn.ShapeError(f"denoiser: spectrogram length {x_t.shape[0]} != condition length {cond.shape[0]}")
        H = self.hidden
        step = Tensor(step_embedding(t, H).astype(cond.dtype))
        step = self.step2(tn.relu(self.step1(step.reshape(1, H)))).reshape(H)
        c = self.cond(cond) + step
        c_all = self.cond_all(c)
        x = tn.relu(self.inp(x_t))
        skip = None
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        for i in range(self.n_layers):
            y = self.dil[i](x) + c_all[:, 2 * H * i: 2 * H * (i + 1)]
            gate = tn.tanh(y[:, :H]) * tn.sigmoid(y[:, H:])
            o = self.res[i](gate)
            x = (x + o[:, :H]) * inv_sqrt2
            skip = o[:, H:] if skip is None else skip + o[:, H:]
        s = tn.relu(self.skip(skip * (1.0 / np.sqrt(self.n_layers))))
        return self.out(s)


# ----------------------------------------------------------------------------- losses


def mae_loss(pred, target) -> Tensor:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise tn.ShapeError(f"mae_loss: shapes {pred.shape} and {target.shape} differ")
    return tn.absolute(pred - target).mean()


def _box_matrix(n: int, k: int) -> np.ndarray:
    m = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        m[i, i: i + k] = 1.0 / k
    return m


def _check_range(x: np.ndarray, what: str, tol: float = 1e-3):
    if x.size and (x.min() < -tol or x.max() > 1.0 + tol):
        raise ValueError(f"ssim: {what} must lie in [0, 1] (got range [{x.min():.4g}, {x.max():.4g}])")


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid ``window x window`` uniform windows (array version)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    kt, km = min(window, a.shape[0]), min(window, a.shape[1])
    L, R = _box_matrix(a.shape[0], kt), _box_matrix(a.shape[1], km).T
    mu_a, mu_b = L @ a @ R, L @ b @ R
    saa = L @ (a * a) @ R - mu_a ** 2
    sbb = L @ (b * b) @ R - mu_b ** 2
    sab = L @ (a * b) @ R - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return float(np.mean(num / den))


def ssim_loss(pred, target, window: int = SSIM_WINDOW, strict: bool = True) -> Tensor:
    """``1 - SSIM(pred, target)``, differentiable in both arguments.

    Inputs must lie in [0, 1] (tolerance 1e-3).  ``strict=False`` only checks
    ``target``, for use on unclamped network output during training.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise tn.ShapeError(f"ssim_loss: shapes {pred.shape} and {target.shape} differ")
    _check_range(target.data, "target")
    if strict:
        _check_range(pred.data, "prediction")
    T, M = pred.shape
    L = Tensor(_box_matrix(T, min(window, T)).astype(pred.dtype))
    R = Tensor(_box_matrix(M, min(window, M)).T.astype(pred.dtype))

    def blur(x):
        return tn.matmul(tn.matmul(L, x), R)

    mu_a, mu_b = blur(pred), blur(target)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    saa = blur(pred * pred) - mu_aa
    sbb = blur(target * target) - mu_bb
    sab = blur(pred * target) - mu_ab
    num = (mu_ab * 2.0 + SSIM_C1) * (sab * 2.0 + SSIM_C2)
    den = (mu_aa + mu_bb + SSIM_C1) * (saa + sbb + SSIM_C2)
    return 1.0 - (num / den).mean()


# ----------------------------------------------------------------------------- sampling


def sample(denoiser: Denoiser, cond: Tensor, schedule: NoiseSchedule, seed: int,
           n_mels: int | None = None) -> np.ndarray:
    """Generate clean frames from pure noise in ``schedule.steps`` denoising passes."""
    n_mels = n_mels or denoiser.out.weight.shape[1]
    rng = np.random.default_rng(seed)
    shape = (cond.shape[0], n_mels)
    with tn.no_grad():
        x_t = rng.standard_normal(shape)
        x0 = None
        for t in range(schedule.steps, 0, -1):
            x0 = np.clip(denoiser(x_t.astype(cond.dtype), t, cond).data.astype(np.float64), 0.0, 1.0)
            if t > 1:
                x_t = diffuse(x0, t - 1, rng.standard_normal(shape), schedule)
    return x0
