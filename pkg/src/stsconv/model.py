"""The full conversion model: encoders, rhythm adaptor, aligner, fusion and decoder.

Training runs the VQ teacher path (rhythm codes from the singing rhythm
curve); inference runs the predictor path (argmax of predicted code logits).
``rhythm_source`` on every output records which path produced the codes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .aligner import Aligner, fuse, interpolation_matrix, stretch
from .config import RunConfig
from .diffusion import Denoiser, NoiseSchedule, diffuse, mae_loss, sample, ssim_loss
from .dsp import N_PITCH_BINS, MelStats, SpectralFrameSeq
from .nn import Encoder, EncoderConfig, Linear, Module, guided_attention_loss
from .rhythm import Codebook, RhythmPredictor, rhythm_ce_loss, vq_quantize
from .tensor import Tensor

__all__ = ["ModelInputs", "LossTerms", "InferenceResult", "STSModel", "CheckpointError",
           "save_checkpoint", "load_checkpoint", "LOSS_NAMES"]

LOSS_NAMES = ("commit", "rhythm_ce", "attn", "mae", "ssim")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelInputs:
    """One utterance as the network sees it (all frame-aligned arrays)."""

    id: str
    content: np.ndarray  # (N, C)
    pitch_bins: np.ndarray  # (T,) int
    timbre: np.ndarray  # (D_timbre,)
    rhythm: np.ndarray | None = None  # (T,) teacher rhythm curve (training)
    target: np.ndarray | None = None  # (T, M) normalised mel (training)
    source_rhythm: np.ndarray | None = None  # rhythm curve of the content source (no-RA ablation)


@dataclass
class LossTerms:
    terms: dict  # name -> weighted scalar Tensor
    total: Tensor
    rhythm_source: str
    codes: np.ndarray
    z_e: np.ndarray | None = None

    def values(self) -> dict:
        out = {k: float(v.data) for k, v in self.terms.items()}
        out["total"] = float(self.total.data)
        return out


@dataclass
class InferenceResult:
    mel: SpectralFrameSeq  # normalised01
    rhythm_indices: np.ndarray
    attentions: dict = field(default_factory=dict)  # name -> (T, N) array
    rhythm_source: str = "predictor"


def _stretch_curve(r: np.ndarray, length: int) -> np.ndarray:
    return interpolation_matrix(length, r.shape[0]) @ np.asarray(r, dtype=np.float64)


class STSModel(Module):
    def __init__(self, cfg: RunConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        H = cfg.hidden
        self.pitch_encoder = Encoder(H, EncoderConfig(cfg.pitch_kernel, cfg.pitch_layers, H), rng, dtype,
                                     vocab=N_PITCH_BINS)
        self.content_encoder = Encoder(cfg.content_dim, EncoderConfig(cfg.content_kernel, cfg.content_layers, H),
                                       rng, dtype)
        self.rhythm_encoder = Encoder(1, EncoderConfig(cfg.rhythm_kernel, cfg.rhythm_layers, H), rng, dtype)
        self.predictor = RhythmPredictor(H, cfg.codebook_size, rng, dtype, heads=cfg.predictor_heads,
                                         window=cfg.predictor_window, ffn_kernel=cfg.ffn_kernel,
                                         dropout=cfg.predictor_dropout)
        self.aligner = Aligner(H, rng, dtype, heads=cfg.aligner_heads, layers=cfg.aligner_layers,
                               window=cfg.aligner_window, ffn_kernel=cfg.ffn_kernel, dropout=cfg.aligner_dropout)
        self.timbre_proj = Linear(cfg.timbre_dim, H, rng, dtype)
        self.denoiser = Denoiser(cfg.n_mels, H, cfg.denoiser_hidden, cfg.denoiser_layers, rng, dtype)
        self.codebook = Codebook(cfg.codebook_size, H, cfg.vq_decay, dtype=dtype)
        if cfg.schedule == "vpsde":
            self.schedule = NoiseSchedule.vpsde(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)
        else:
            self.schedule = NoiseSchedule.linear(cfg.diffusion_steps, cfg.linear_beta_start, cfg.linear_beta_end)
        self.stats: MelStats | None = None
        self.step = 0

    # ------------------------------------------------------------------ pieces

    def _t(self, x) -> Tensor:
        return Tensor(np.asarray(x, dtype=self.dtype))

    def encode_rhythm(self, curve: np.ndarray) -> Tensor:
        return self.rhythm_encoder(self._t(np.asarray(curve)[:, None]))

    def _encode(self, inp: ModelInputs):
        pitch = np.asarray(inp.pitch_bins, dtype=np.int64)
        if pitch.size == 0:
            raise ValueError(f"{inp.id}: empty F0 contour")
        if inp.content.shape[0] == 0:
            raise ValueError(f"{inp.id}: empty content features")
        return self.content_encoder(self._t(inp.content)), self.pitch_encoder(pitch)

    def _decode_condition(self, C: Tensor, P: Tensor, R: Tensor, timbre, rng):
        attns = []
        if self.cfg.no_cm:
            A = stretch(C, R.shape[0])
        else:
            A, attns = self.aligner(R, C, rng)
        t_vec = self.timbre_proj(self._t(timbre).reshape(1, -1)).reshape(self.cfg.hidden)
        fused = fuse(A, R, None if self.cfg.no_f0_skip else P, t_vec)
        return fused, attns

    # ------------------------------------------------------------------ training

    def loss_terms(self, inp: ModelInputs, rng: np.random.Generator) -> LossTerms:
        """Weighted loss terms for one utterance on the VQ-teacher path."""
        cfg = self.cfg
        if not self.codebook.initialized:
            raise RuntimeError("codebook is not initialised; call init_codebook first")
        C, P = self._encode(inp)
        T = P.shape[0]
        if inp.rhythm is None or inp.target is None:
            raise ValueError(f"{inp.id}: training needs a rhythm curve and a target mel")
        if len(inp.rhythm) != T or inp.target.shape[0] != T:
            raise tn.ShapeError(f"{inp.id}: rhythm/target/pitch lengths {len(inp.rhythm)}/"
                                f"{inp.target.shape[0]}/{T} differ")
        z_e = self.encode_rhythm(inp.rhythm)
        codes, commit = vq_quantize(z_e, self.codebook)
        terms = {"commit": commit * cfg.w_commit}
        attn_mats = []
        if cfg.no_ra:
            src = inp.source_rhythm if inp.source_rhythm is not None else inp.rhythm
            src_codes, _ = vq_quantize(self.encode_rhythm(_stretch_curve(src, T)), self.codebook)
            R, source = src_codes.embeddings, "source_vq"
        else:
            logits, attn_p = self.predictor(C, P, rng)
            terms["rhythm_ce"] = rhythm_ce_loss(logits, codes.indices) * cfg.w_rhythm
            attn_mats.append(attn_p)
            R, source = codes.embeddings, "vq_teacher"
        fused, attns = self._decode_condition(C, P, R, inp.timbre, rng)
        attn_mats += attns
        if attn_mats:
            g = sum((guided_attention_loss(a, cfg.guided_g) for a in attn_mats[1:]),
                    guided_attention_loss(attn_mats[0], cfg.guided_g))
            terms["attn"] = g * cfg.w_attn

        t = int(rng.integers(1, self.schedule.steps + 1))
        x0 = np.asarray(inp.target, dtype=self.dtype)
        x_t = diffuse(x0, t, rng.standard_normal(x0.shape).astype(self.dtype), self.schedule)
        x0_hat = self.denoiser(x_t, t, fused.frames)
        terms["mae"] = mae_loss(x0_hat, x0) * cfg.w_mae
        terms["ssim"] = ssim_loss(x0_hat, x0, strict=False) * cfg.w_ssim
        total = None
        for name in LOSS_NAMES:
            if name in terms:
                total = terms[name] if total is None else total + terms[name]
        return LossTerms(terms, total, source, codes.indices, z_e.data)

    def init_codebook(self, curves, rng: np.random.Generator) -> None:
        with tn.no_grad():
            z = np.concatenate([self.encode_rhythm(c).data for c in curves], axis=0)
        self.codebook.init_from(z, rng)

    # ------------------------------------------------------------------ inference

    def infer(self, inp: ModelInputs, seed: int = 0) -> InferenceResult:
        """Convert one utterance; output length follows the pitch contour."""
        if not self.codebook.initialized or self.stats is None:
            raise RuntimeError("model is untrained (no codebook or mel statistics)")
        was_training = self.training
        self.eval()
        try:
            with tn.no_grad():
                C, P = self._encode(inp)
                T = P.shape[0]
                attentions = {}
                if self.cfg.no_ra:
                    if inp.source_rhythm is None:
                        raise ValueError(f"{inp.id}: no-RA inference needs the source rhythm curve")
                    idx = self.codebook.nearest(self.encode_rhythm(_stretch_curve(inp.source_rhythm, T)).data)
                    source = "source_vq"
                else:
                    logits, attn_p = self.predictor(C, P)
                    idx = np.argmax(logits.data, axis=1)
                    attentions["predictor"] = attn_p.data.astype(np.float64)
                    source = "predictor"
                R = self._t(self.codebook.embeddings[idx])
                fused, attns = self._decode_condition(C, P, R, inp.timbre, None)
                for i, a in enumerate(attns):
                    attentions[f"aligner{i}"] = a.data.astype(np.float64)
                mel = sample(self.denoiser, fused.frames, self.schedule, seed, self.cfg.n_mels)
        finally:
            self.train(was_training)
        return InferenceResult(SpectralFrameSeq(mel, "normalized01"), idx, attentions, source)


# ---------------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: STSModel, extra: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    tensors.update(model.codebook.state())
    meta = {
        "format": "stsconv-checkpoint",
        "config": model.cfg.to_dict(),
        "step": model.step,
        "mel_stats": None if model.stats is None else [model.stats.log_min, model.stats.log_max],
        "codebook_initialized": model.codebook.initialized,
        "codebook_frozen": model.codebook.frozen,
    }
    if extra:
        meta["extra"] = extra
    tn.save_archive(path, tensors, meta)


def load_checkpoint(path) -> STSModel:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        tensors, meta = tn.load_archive(path)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    if meta.get("format") != "stsconv-checkpoint":
        raise CheckpointError(f"{path}: not a model checkpoint")
    model = STSModel(RunConfig.from_dict(meta["config"]))
    cb = {k: tensors.pop(k) for k in list(tensors) if k.startswith("codebook.")}
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if meta.get("codebook_initialized"):
        model.codebook.load_state(cb)
    model.codebook.frozen = bool(meta.get("codebook_frozen"))
    if meta.get("mel_stats") is not None:
        model.stats = MelStats(*meta["mel_stats"])
    model.step = int(meta.get("step", 0))
    return model
