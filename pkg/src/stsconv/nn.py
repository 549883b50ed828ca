"""Network building blocks on top of :mod:`stsconv.tensor`."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

__all__ = [
    "Module",
    "Linear",
    "Conv1d",
    "LayerNorm",
    "Embedding",
    "EncoderConfig",
    "Encoder",
    "WindowSpec",
    "window_mask",
    "positional_encoding",
    "CrossAttention",
    "AttentionLayer",
    "guided_attention_weights",
    "guided_attention_loss",
    "Adam",
]


class Module:
    """Parameter container; parameters are discovered from attributes in order."""

    training = True

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype)


def _param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def _xavier(rng, fan_in, fan_out, shape, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return _param(rng.uniform(-bound, bound, size=shape), dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, bias: bool = True, zero: bool = False):
        if zero:
            self.weight = _param(np.zeros((d_in, d_out)), dtype)
        else:
            self.weight = _xavier(rng, d_in, d_out, (d_in, d_out), dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = tn.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, dtype=np.float32, dilation: int = 1):
        if kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {kernel}")
        self.dilation = dilation
        self.weight = _xavier(rng, c_in * kernel, c_out * kernel, (kernel, c_in, c_out), dtype)
        self.bias = _param(np.zeros(c_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv1d(x, self.weight, self.bias, self.dilation)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gamma = _param(np.ones(dim), dtype)
        self.beta = _param(np.zeros(dim), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng, dtype=np.float32):
        self.table = _param(rng.standard_normal((n, dim)) * dim ** -0.5, dtype)

    def __call__(self, idx) -> Tensor:
        return tn.embedding(self.table, idx)


# ------------------------------------------------------------------------ encoders


@dataclass(frozen=True)
class EncoderConfig:
    kernel: int
    layers: int
    hidden: int

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"encoder kernel must be odd, got {self.kernel}")
        if self.hidden <= 0 or self.layers <= 0:
            raise ValueError("encoder hidden size and layer count must be positive")


class Encoder(Module):
    """Stack of same-padded 1-D convolutions, ReLU + LayerNorm between layers.

    With ``vocab`` set the input is an integer sequence that is embedded first
    (used for quantised pitch).
    """

    def __init__(self, in_dim: int, cfg: EncoderConfig, rng, dtype=np.float32, vocab: int | None = None):
        self.cfg = cfg
        self.in_dim = in_dim
        self.embed = Embedding(vocab, cfg.hidden, rng, dtype) if vocab else None
        first = cfg.hidden if vocab else in_dim
        self.convs = [
            Conv1d(first if i == 0 else cfg.hidden, cfg.hidden, cfg.kernel, rng, dtype)
            for i in range(cfg.layers)
        ]
        self.norms = [LayerNorm(cfg.hidden, dtype) for _ in range(cfg.layers - 1)]

    def __call__(self, x) -> Tensor:
        if self.embed is not None:
            x = self.embed(x)
        elif x.shape[-1] != self.in_dim:
            raise tn.ShapeError(f"encoder expects {self.in_dim} input channels, got shape {x.shape}")
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.norms):
                x = self.norms[i](tn.relu(x))
        return x


def positional_encoding(T: int, d: int) -> np.ndarray:
    """Sinusoidal table: even columns sin(t / 10000^(2i/d)), odd columns cos."""
    if d % 2:
        raise ValueError(f"positional encoding dimension must be even, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    rates = 1.0 / 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((T, d))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates)
    return table


# ----------------------------------------------------------------------- attention


@dataclass(frozen=True)
class WindowSpec:
    width_fraction: float
    mask_value: float = -1e8

    def __post_init__(self):
        if not 0.0 < self.width_fraction <= 1.0:
            raise ValueError("width_fraction must lie in (0, 1]")
        if self.mask_value > -1e8:
            raise ValueError("mask_value must be <= -1e8")


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def window_centers(T: int, N: int) -> np.ndarray:
    return _round_half_up(np.arange(T) * (N - 1) / max(T - 1, 1))


def window_mask(T: int, N: int, window: WindowSpec) -> np.ndarray:
    """True where key ``n`` lies outside ``[p_t - w, p_t + w]`` for query ``t``."""
    p = window_centers(T, N)
    w = int(_round_half_up(window.width_fraction * N))
    n = np.arange(N)[None, :]
    return (n < (p - w)[:, None]) | (n > (p + w)[:, None])


class CrossAttention(Module):
    """Scaled dot-product attention with learned projections and optional windowing."""

    def __init__(self, d: int, heads: int, rng, dtype=np.float32):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, window: WindowSpec | None = None,
                 dropout: float = 0.0, rng=None):
        T, N = q_in.shape[0], k_in.shape[0]
        h, dh = self.heads, self.d // self.heads
        Q = tn.transpose(self.q(q_in).reshape(T, h, dh), (1, 0, 2))
        K = tn.transpose(self.k(k_in).reshape(N, h, dh), (1, 2, 0))
        V = tn.transpose(self.v(v_in).reshape(N, h, dh), (1, 0, 2))
        scores = tn.matmul(Q, K) * (1.0 / np.sqrt(dh))
        if window is not None:
            scores = tn.masked_fill(scores, window_mask(T, N, window), window.mask_value)
        weights = tn.softmax(scores, axis=-1)
        attn = weights.mean(axis=0) if h > 1 else weights.reshape(T, N)
        weights = tn.dropout(weights, dropout, rng, self.training)
        ctx = tn.transpose(tn.matmul(weights, V), (1, 0, 2)).reshape(T, self.d)
        return self.o(ctx), attn


class AttentionLayer(Module):
    """Cross-attention followed by a conv + fully-connected feed-forward block.

    Both sub-blocks are residual and post-normalised.
    """

    def __init__(self, d: int, heads: int, ffn_kernel: int, rng, dtype=np.float32,
                 window: WindowSpec | None = None, dropout: float = 0.0):
        self.window = window
        self.dropout = dropout
        self.attn = CrossAttention(d, heads, rng, dtype)
        self.norm1 = LayerNorm(d, dtype)
        self.ffn_conv = Conv1d(d, d, ffn_kernel, rng, dtype)
        self.ffn_fc = Linear(d, d, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)

    def __call__(self, q: Tensor, kv: Tensor, rng=None):
        a, attn = self.attn(q, kv, kv, self.window, self.dropout, rng)
        h = self.norm1(q + tn.dropout(a, self.dropout, rng, self.training))
        f = self.ffn_fc(tn.relu(self.ffn_conv(h)))
        return self.norm2(h + tn.dropout(f, self.dropout, rng, self.training)), attn


def guided_attention_weights(T: int, N: int, g: float = 0.1) -> np.ndarray:
    """``w[t, n] = 1 - exp(-((n/N - t/T)^2) / (2 g^2))`` with 1-based ``t`` and ``n``."""
    t = np.arange(1, T + 1, dtype=np.float64)[:, None] / T
    n = np.arange(1, N + 1, dtype=np.float64)[None, :] / N
    return 1.0 - np.exp(-((n - t) ** 2) / (2.0 * g * g))


def guided_attention_loss(attention, g: float = 0.1):
    """Mean of attention mass weighted by distance from the normalised diagonal."""
    if isinstance(attention, Tensor):
        T, N = attention.shape
        w = Tensor(guided_attention_weights(T, N, g).astype(attention.dtype))
        return (attention * w).sum() * (1.0 / (T * N))
    a = np.asarray(attention, dtype=np.float64)
    T, N = a.shape
    return float((a * guided_attention_weights(T, N, g)).sum() / (T * N))


# ----------------------------------------------------------------------- optimiser


class Adam:
    """Adam with global gradient-norm clipping."""

    def __init__(self, params, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 1.0):
        self.params = list(params)
        self.lr, self.eps, self.clip_norm = lr, eps, clip_norm
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> float:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-6)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return norm

    def zero_grad(self):
        for p in self.params:
            p.grad = None
