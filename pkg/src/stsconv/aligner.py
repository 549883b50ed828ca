"""Cross-modal aligner and the additive fusion of content, rhythm, pitch and timbre."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .nn import AttentionLayer, Module, WindowSpec, positional_encoding
from .tensor import Tensor

__all__ = ["Aligner", "FusedSequence", "fuse", "interpolation_matrix", "stretch"]


class Aligner(Module):
    """Stack of windowed cross-attention layers: rhythm queries, content keys/values."""

    def __init__(self, d: int, rng, dtype=np.float32, heads: int = 2, layers: int = 2,
                 window: float = 0.4, ffn_kernel: int = 9, dropout: float = 0.1):
        self.layers = [
            AttentionLayer(d, heads, ffn_kernel, rng, dtype, WindowSpec(window), dropout)
            for _ in range(layers)
        ]

    def __call__(self, rhythm_emb: Tensor, content: Tensor, rng=None):
        if rhythm_emb.shape[0] == 0 or content.shape[0] == 0:
            raise ValueError("aligner needs non-empty rhythm and content sequences")
        d = content.shape[1]
        h = rhythm_emb + Tensor(positional_encoding(rhythm_emb.shape[0], d).astype(rhythm_emb.dtype))
        kv = content + Tensor(positional_encoding(content.shape[0], d).astype(content.dtype))
        attentions = []
        for layer in self.layers:
            h, attn = layer(h, kv, rng)
            attentions.append(attn)
        return h, attentions


@dataclass
class FusedSequence:
    frames: Tensor  # (T, H)
    components: dict = field(default_factory=dict)

    def __len__(self):
        return self.frames.shape[0]


def fuse(aligned_content: Tensor, rhythm_emb: Tensor, pitch_enc: Tensor | None,
         timbre: Tensor | None) -> FusedSequence:
    """Element-wise sum of the aligned streams plus a broadcast timbre vector.

    ``pitch_enc=None`` drops the pitch skip connection; ``timbre`` is the
    already-projected ``(H,)`` vector or None.
    """
    T = aligned_content.shape[0]
    streams = {"content": aligned_content, "rhythm": rhythm_emb}
    if pitch_enc is not None:
        streams["pitch"] = pitch_enc
    for name, s in streams.items():
        if s.shape != aligned_content.shape:
            raise tn.ShapeError(f"fuse: {name} stream has shape {s.shape}, expected {aligned_content.shape}")
    out = aligned_content + rhythm_emb
    if pitch_enc is not None:
        out = out + pitch_enc
    if timbre is not None:
        if timbre.shape != (aligned_content.shape[1],):
            raise tn.ShapeError(f"fuse: timbre shape {timbre.shape} != ({aligned_content.shape[1]},)")
        out = out + timbre
        streams["timbre"] = timbre
    assert out.shape[0] == T
    return FusedSequence(out, streams)


def interpolation_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """``(n_out, n_in)`` linear-interpolation operator (endpoints aligned)."""
    M = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        M[:, 0] = 1.0
        return M
    src = np.linspace(0.0, n_in - 1, n_out)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(M, (rows, lo), 1.0 - frac)
    np.add.at(M, (rows, hi), frac)
    return M


def stretch(x: Tensor, length: int) -> Tensor:
    """Differentiable linear stretch of a ``(T, C)`` sequence to ``length`` frames."""
    return tn.matmul(Tensor(interpolation_matrix(length, x.shape[0], x.dtype)), x)

