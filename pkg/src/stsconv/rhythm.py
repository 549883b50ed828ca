"""Rhythm adaptor: VQ codebook over encoded rhythm and the rhythm predictor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .nn import AttentionLayer, Conv1d, Linear, Module, WindowSpec, positional_encoding
from .tensor import Tensor

__all__ = [
    "Codebook",
    "RhythmCodeSeq",
    "vq_quantize",
    "kmeans",
    "RhythmPredictor",
    "rhythm_ce_loss",
]


class Codebook:
    """``K x D`` code vectors learned by exponential moving averages.

    The EMA statistics (cluster sizes and summed assignments) are the only
    mutable state; :meth:`ema_update` is the single writer.
    """

    def __init__(self, K: int, D: int, decay: float = 0.99, eps: float = 1e-5, dtype=np.float32):
        if K < 2:
            raise ValueError("codebook needs at least two entries")
        self.K, self.D, self.decay, self.eps = K, D, decay, eps
        self.embeddings = np.zeros((K, D), dtype=dtype)
        self.cluster_size = np.zeros(K, dtype=np.float64)
        self.embed_sum = np.zeros((K, D), dtype=np.float64)
        self.initialized = False
        self.frozen = False

    def init_from(self, z: np.ndarray, rng: np.random.Generator, iters: int = 25) -> None:
        centers = kmeans(np.asarray(z, dtype=np.float64), self.K, rng, iters)
        self.embeddings = centers.astype(self.embeddings.dtype)
        self.cluster_size = np.ones(self.K)
        self.embed_sum = centers.copy()
        self.initialized = True

    def nearest(self, z: np.ndarray) -> np.ndarray:
        e = self.embeddings.astype(np.float64)
        z = np.asarray(z, dtype=np.float64)
        d = (z * z).sum(1, keepdims=True) - 2.0 * z @ e.T + (e * e).sum(1)[None, :]
        return np.argmin(d, axis=1)

    def ema_update(self, z: np.ndarray, idx: np.ndarray) -> None:
        if self.frozen:
            return
        z = np.asarray(z, dtype=np.float64)
        onehot = np.zeros((z.shape[0], self.K))
        onehot[np.arange(z.shape[0]), idx] = 1.0
        self.cluster_size = self.decay * self.cluster_size + (1 - self.decay) * onehot.sum(0)
        self.embed_sum = self.decay * self.embed_sum + (1 - self.decay) * onehot.T @ z
        n = self.cluster_size.sum()
        size = (self.cluster_size + self.eps) / (n + self.K * self.eps) * n
        self.embeddings = (self.embed_sum / size[:, None]).astype(self.embeddings.dtype)

    def state(self) -> dict:
        return {
            "codebook.embeddings": self.embeddings,
            "codebook.cluster_size": self.cluster_size[None, :],
            "codebook.embed_sum": self.embed_sum,
        }

    def load_state(self, state: dict) -> None:
        emb = np.asarray(state["codebook.embeddings"])
        if emb.shape != (self.K, self.D):
            raise ValueError(f"codebook shape {emb.shape} != {(self.K, self.D)}")
        self.embeddings = emb.astype(self.embeddings.dtype)
        self.cluster_size = np.asarray(state["codebook.cluster_size"], dtype=np.float64).reshape(-1)
        self.embed_sum = np.asarray(state["codebook.embed_sum"], dtype=np.float64)
        self.initialized = True


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = 25) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; empty clusters are re-seeded."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("kmeans on empty data")
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d.sum()
        p = d / total if total > 0 else np.full(n, 1.0 / n)
        centers.append(x[rng.choice(n, p=p)])
    c = np.array(centers)
    for _ in range(iters):
        d = ((x[:, None, :] - c[None]) ** 2).sum(-1)
        lab = d.argmin(1)
        for j in range(k):
            members = x[lab == j]
            if members.shape[0]:
                c[j] = members.mean(0)
            else:
                c[j] = x[d.min(1).argmax()]
    return c


@dataclass
class RhythmCodeSeq:
    indices: np.ndarray
    embeddings: Tensor  # (T, D); straight-through w.r.t. the encoder output during training


def vq_quantize(z_e: Tensor, codebook: Codebook) -> tuple[RhythmCodeSeq, Tensor]:
    """Nearest-code quantisation with a commitment loss and straight-through output.

    ``commitment = mean_t ||z_e[t] - sg(e[k_t])||^2``.  The returned embeddings
    carry the code values forward and pass gradients to ``z_e`` unchanged.
    """
    if z_e.shape[-1] != codebook.D:
        raise tn.ShapeError(f"vq: input dim {z_e.shape[-1]} != codebook dim {codebook.D}")
    idx = codebook.nearest(z_e.data)
    q = codebook.embeddings[idx].astype(z_e.dtype)
    diff = z_e - Tensor(q)
    commit = (diff * diff).sum(axis=1).mean()
    return RhythmCodeSeq(idx, tn.straight_through(z_e, q)), commit


class RhythmPredictor(Module):
    """Cross-attention (pitch queries content) + conv stack -> K code logits per pitch frame."""

    def __init__(self, d: int, K: int, rng, dtype=np.float32, heads: int = 1, window: float = 0.5,
                 ffn_kernel: int = 9, conv_kernel: int = 3, conv_layers: int = 2, dropout: float = 0.8):
        self.dropout = dropout
        self.attn = AttentionLayer(d, heads, ffn_kernel, rng, dtype, WindowSpec(window))
        self.convs = [Conv1d(d, d, conv_kernel, rng, dtype) for _ in range(conv_layers)]
        self.out = Linear(d, K, rng, dtype)

    def __call__(self, content: Tensor, pitch: Tensor, rng=None):
        if content.shape[0] == 0 or pitch.shape[0] == 0:
            raise ValueError("rhythm predictor needs non-empty content and pitch")
        d = pitch.shape[1]
        q = pitch + Tensor(positional_encoding(pitch.shape[0], d).astype(pitch.dtype))
        kv = content + Tensor(positional_encoding(content.shape[0], d).astype(content.dtype))
        h, attn = self.attn(q, kv, rng)
        for conv in self.convs:
            h = tn.dropout(tn.relu(conv(h)), self.dropout, rng, self.training)
        return self.out(h), attn


def rhythm_ce_loss(logits: Tensor, targets) -> Tensor:
    """Frame-averaged cross-entropy of code logits against target indices."""
    targets = np.asarray(targets, dtype=np.int64)
    T, K = logits.shape
    if targets.shape != (T,):
        raise tn.ShapeError(f"targets shape {targets.shape} != ({T},)")
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise IndexError(f"target index out of range [0, {K})")
    logp = tn.log_softmax(logits, axis=-1)
    return -(logp[np.arange(T), targets].sum() * (1.0 / T))
