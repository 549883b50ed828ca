"""Deterministic signal processing: STFT / mel, F0, energy, rhythm and playback."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct
from scipy.ndimage import gaussian_filter1d
from scipy.special import expit

from .audio_io import AudioClip

__all__ = [
    "SpectralFrameSeq",
    "PitchContour",
    "RhythmCurve",
    "MelStats",
    "DSPError",
    "frame_count",
    "stft",
    "istft",
    "mel_filterbank",
    "mel_center_frequencies",
    "stft_mel",
    "energy_contour",
    "extract_rhythm",
    "gaussian_smooth",
    "estimate_f0",
    "quantize_f0",
    "bin_center_hz",
    "silence_mask",
    "remove_silence",
    "griffin_lim",
    "mel_to_linear",
    "cepstral_content",
]

WINDOW = 512
HOP = 128
N_MELS = 80
LOG_FLOOR = 1e-5
F_MIN = 80.0
F_MAX = 1000.0
N_PITCH_BINS = 256


class DSPError(ValueError):
    pass


@dataclass
class SpectralFrameSeq:
    frames: np.ndarray  # (T, M)
    scale: str = "linear"  # linear | log | normalized01
    window_size: int = WINDOW
    hop_size: int = HOP

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.scale not in ("linear", "log", "normalized01"):
            raise DSPError(f"unknown scale {self.scale!r}")
        if not np.all(np.isfinite(self.frames)):
            raise DSPError("spectral frames contain non-finite values")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


@dataclass
class PitchContour:
    f0_hz: np.ndarray
    bins: np.ndarray | None = None

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        if self.bins is None:
            self.bins = quantize_f0(self.f0_hz)

    def __len__(self):
        return self.f0_hz.shape[0]

    @property
    def voiced(self) -> np.ndarray:
        return self.f0_hz > 0


@dataclass
class RhythmCurve:
    r: np.ndarray
    beta: float = 400.0
    epsilon: float = 1e-8

    def __len__(self):
        return self.r.shape[0]


@dataclass
class MelStats:
    """Corpus-level log-mel range used to map log mels into [0, 1]."""

    log_min: float
    log_max: float

    def normalize(self, log_mel: np.ndarray) -> np.ndarray:
        span = max(self.log_max - self.log_min, 1e-8)
        return np.clip((np.asarray(log_mel) - self.log_min) / span, 0.0, 1.0)

    def denormalize(self, norm_mel: np.ndarray) -> np.ndarray:
        return np.asarray(norm_mel) * (self.log_max - self.log_min) + self.log_min

    @classmethod
    def from_mels(cls, log_mels) -> "MelStats":
        lo = min(float(np.min(m)) for m in log_mels)
        hi = max(float(np.max(m)) for m in log_mels)
        return cls(lo, hi)


# ----------------------------------------------------------------------- stft/mel


def frame_count(n: int, window: int = WINDOW, hop: int = HOP) -> int:
    return (n - window) // hop + 1


def _hann(window: int) -> np.ndarray:
    return np.hanning(window + 1)[:-1]


def _frames(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    n = frame_count(x.shape[0], window, hop)
    idx = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def stft(x: np.ndarray, window: int = WINDOW, hop: int = HOP, center: bool = False) -> np.ndarray:
    """Complex STFT, time-major ``(T, window // 2 + 1)``."""
    x = np.asarray(x, dtype=np.float64)
    if center:
        x = np.pad(x, window // 2, mode="reflect" if x.size > window // 2 else "constant")
    if x.shape[0] < window:
        raise DSPError(f"clip of {x.shape[0]} samples is shorter than one window ({window})")
    return np.fft.rfft(_frames(x, window, hop) * _hann(window), axis=1)


def istft(spec: np.ndarray, window: int = WINDOW, hop: int = HOP) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft` (``center=False``)."""
    T = spec.shape[0]
    frames = np.fft.irfft(spec, n=window, axis=1)
    w = _hann(window)
    n = (T - 1) * hop + window
    out = np.zeros(n)
    wsum = np.zeros(n)
    for t in range(T):
        out[t * hop: t * hop + window] += frames[t] * w
        wsum[t * hop: t * hop + window] += w * w
    return out / np.maximum(wsum, 1e-2 * wsum.max() if wsum.max() > 0 else 1.0)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, sr: int = 24000, fmin: float = 0.0,
                           fmax: float | None = None) -> np.ndarray:
    fmax = sr / 2 if fmax is None else fmax
    pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    return pts[1:-1]


@lru_cache(maxsize=8)
def _mel_filterbank_cached(n_mels, sr, n_fft, fmin, fmax):
    fmax = sr / 2 if fmax is None else fmax
    pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_filterbank(n_mels: int = N_MELS, sr: int = 24000, n_fft: int = WINDOW,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filterbank ``(n_mels, n_fft // 2 + 1)`` with unit peaks."""
    return _mel_filterbank_cached(n_mels, sr, n_fft, fmin, fmax)


@lru_cache(maxsize=8)
def _mel_pinv(n_mels, sr, n_fft):
    p = np.linalg.pinv(mel_filterbank(n_mels, sr, n_fft))
    p.setflags(write=False)
    return p


def stft_mel(clip: AudioClip, n_mels: int = N_MELS, window: int = WINDOW, hop: int = HOP,
             log: bool = False, center: bool = False) -> SpectralFrameSeq:
    """Magnitude mel spectrogram of ``clip``.

    Without centring the frame count is ``floor((n - window) / hop) + 1``.  With
    ``log=True`` magnitudes are floored at ``LOG_FLOOR`` before the natural log.
    """
    if len(clip) == 0:
        raise DSPError("empty audio")
    mag = np.abs(stft(clip.samples, window, hop, center))
    mel = mag @ mel_filterbank(n_mels, clip.sample_rate, window).T
    if log:
        return SpectralFrameSeq(np.log(np.maximum(mel, LOG_FLOOR)), "log", window, hop)
    return SpectralFrameSeq(mel, "linear", window, hop)


def mel_to_linear(mel: np.ndarray, sr: int = 24000, n_fft: int = WINDOW) -> np.ndarray:
    """Least-squares (pseudo-inverse) magnitude spectrogram from linear mel frames."""
    return np.maximum(np.asarray(mel) @ _mel_pinv(mel.shape[1], sr, n_fft).T, 0.0)


# ------------------------------------------------------------------ energy/rhythm


def energy_contour(frames) -> np.ndarray:
    """Per-frame L2 norm across frequency bins of linear-magnitude frames."""
    if isinstance(frames, SpectralFrameSeq):
        if frames.scale != "linear":
            raise DSPError("energy_contour expects linear-scale frames")
        frames = frames.frames
    frames = np.asarray(frames, dtype=np.float64)
    return np.sqrt(np.sum(frames * frames, axis=1))


def gaussian_smooth(x: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian filter, radius ``4 * sigma``, reflect padding."""
    if sigma <= 0:
        return np.asarray(x, dtype=np.float64).copy()
    return gaussian_filter1d(np.asarray(x, dtype=np.float64), sigma, mode="reflect", truncate=4.0)


_R_LO = np.finfo(np.float64).tiny
_R_HI = np.nextafter(1.0, 0.0)


def extract_rhythm(e, beta: float = 400.0, epsilon: float = 1e-8,
                   smooth_sigma: float = 1.0) -> RhythmCurve:
    """Sigmoid-normalised energy contour, optionally Gaussian smoothed.

    ``r_t = sigmoid(beta * (e_t - mean(e)) / (std(e) + epsilon))`` using the
    population standard deviation.  Outputs are kept strictly inside (0, 1).
    """
    e = np.asarray(e, dtype=np.float64)
    if e.size == 0:
        raise DSPError("energy contour is empty")
    if not np.all(np.isfinite(e)):
        raise DSPError("energy contour contains non-finite values")
    centered = e - e.mean()
    denom = e.std() + epsilon
    if denom == 0.0:
        z = np.zeros_like(e)
    else:
        z = centered / denom
    r = np.clip(expit(beta * z), _R_LO, _R_HI)
    if smooth_sigma > 0:
        r = np.clip(gaussian_smooth(r, smooth_sigma), _R_LO, _R_HI)
    return RhythmCurve(r, beta, epsilon)


# ---------------------------------------------------------------------------- f0


def estimate_f0(clip: AudioClip, window: int = WINDOW, hop: int = HOP, f_min: float = F_MIN,
                f_max: float = F_MAX, threshold: float = 0.15, frame_length: int = 1024,
                rms_gate: float = 3e-4) -> np.ndarray:
    """YIN-style F0 track on the STFT hop grid (0 Hz marks unvoiced frames).

    Frame ``t`` is analysed around sample ``t * hop + window // 2`` with a
    ``frame_length`` excerpt; the cumulative-mean-normalised difference
    function is searched for its first dip below ``threshold``.
    """
    x = clip.samples
    sr = clip.sample_rate
    n_frames = frame_count(x.shape[0], window, hop)
    if n_frames <= 0:
        return np.zeros(0)
    min_lag = max(2, int(np.floor(sr / f_max)))
    max_lag = int(np.ceil(sr / f_min))
    L = max(frame_length, max_lag + 64)
    W = L - max_lag - 1
    half = L // 2
    padded = np.pad(x, (half, half))
    centers = np.arange(n_frames) * hop + window // 2
    idx = centers[:, None] + np.arange(L)[None, :]  # offset by `half` through padding
    frames = padded[idx]

    nfft = 1 << int(np.ceil(np.log2(2 * L)))
    A = np.fft.rfft(frames, nfft, axis=1)
    B = np.fft.rfft(frames[:, :W], nfft, axis=1)
    r = np.fft.irfft(A * np.conj(B), nfft, axis=1)[:, : max_lag + 2]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(max_lag + 2)
    e0 = sq[:, W][:, None]
    et = sq[:, lags + W] - sq[:, lags]
    d = np.maximum(e0 + et - 2.0 * r, 0.0)
    d[:, 0] = 0.0
    csum = np.cumsum(d[:, 1:], axis=1)
    cmnd = np.ones_like(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(csum > 0, d[:, 1:] * lags[1:] / csum, 1.0)

    rms = np.sqrt(sq[:, W] / W)
    gate = max(rms_gate, 0.01 * float(rms.max()) if rms.size else 0.0)
    f0 = np.zeros(n_frames)
    for t in range(n_frames):
        if rms[t] < gate:
            continue
        c = cmnd[t]
        below = np.nonzero(c[min_lag: max_lag + 1] < threshold)[0]
        if below.size == 0:
            continue
        tau = below[0] + min_lag
        while tau + 1 <= max_lag and c[tau + 1] < c[tau]:
            tau += 1
        # parabolic refinement
        if 1 <= tau < max_lag + 1:
            a, b, cc = c[tau - 1], c[tau], c[tau + 1]
            denom = a - 2 * b + cc
            shift = 0.5 * (a - cc) / denom if denom > 0 else 0.0
            tau_f = tau + float(np.clip(shift, -1.0, 1.0))
        else:
            tau_f = float(tau)
        hz = sr / tau_f
        if f_min <= hz <= f_max:
            f0[t] = hz
    return f0


def quantize_f0(f0_hz, f_min: float = F_MIN, f_max: float = F_MAX,
                n_bins: int = N_PITCH_BINS) -> np.ndarray:
    """Map Hz to integer bins: 0 = unvoiced, voiced log-uniform over 1..n_bins-1."""
    if not f_min < f_max:
        raise DSPError("f_min must be below f_max")
    f0 = np.asarray(f0_hz, dtype=np.float64)
    out = np.zeros(f0.shape, dtype=np.int64)
    voiced = f0 > 0
    pos = (np.log(np.clip(f0[voiced], f_min, f_max)) - np.log(f_min)) / (np.log(f_max) - np.log(f_min))
    out[voiced] = 1 + np.round(pos * (n_bins - 2)).astype(np.int64)
    return out


def bin_center_hz(bins, f_min: float = F_MIN, f_max: float = F_MAX,
                  n_bins: int = N_PITCH_BINS) -> np.ndarray:
    b = np.asarray(bins)
    pos = (b - 1) / (n_bins - 2)
    hz = np.exp(np.log(f_min) + pos * (np.log(f_max) - np.log(f_min)))
    return np.where(b > 0, hz, 0.0)


# ----------------------------------------------------------------------- silence


def silence_mask(energy: np.ndarray, threshold_ratio: float = 0.02, min_run: int = 5) -> np.ndarray:
    """Boolean keep-mask: False on runs of >= ``min_run`` low-energy frames."""
    energy = np.asarray(energy, dtype=np.float64)
    ref = np.percentile(energy, 95) if energy.size else 0.0
    if ref <= 0:
        raise DSPError("no voiced content")
    low = energy < threshold_ratio * ref
    keep = np.ones(energy.shape[0], dtype=bool)
    t = 0
    n = energy.shape[0]
    while t < n:
        if low[t]:
            s = t
            while t < n and low[t]:
                t += 1
            if t - s >= min_run:
                keep[s:t] = False
        else:
            t += 1
    if not keep.any():
        raise DSPError("no voiced content")
    return keep


def remove_silence(frames, *streams, threshold_ratio: float = 0.02, min_run: int = 5):
    """Drop long silent runs (judged on ``frames`` energy) from every stream.

    ``frames`` must be linear-magnitude; ``streams`` are any arrays (or None)
    sharing its leading length.  Returns ``(frames, *streams)`` trimmed with
    the same index set.
    """
    arr = frames.frames if isinstance(frames, SpectralFrameSeq) else np.asarray(frames)
    n = arr.shape[0]
    for s in streams:
        if s is not None and np.asarray(s).shape[0] != n:
            raise DSPError(f"stream length {np.asarray(s).shape[0]} differs from frame count {n}")
    keep = silence_mask(energy_contour(arr), threshold_ratio, min_run)
    out = [SpectralFrameSeq(arr[keep], frames.scale, frames.window_size, frames.hop_size)
           if isinstance(frames, SpectralFrameSeq) else arr[keep]]
    out += [None if s is None else np.asarray(s)[keep] for s in streams]
    return tuple(out)


# -------------------------------------------------------------------- playback


def griffin_lim(frames: SpectralFrameSeq, iters: int = 32, sr: int = 24000,
                stats: MelStats | None = None) -> AudioClip:
    """Phase reconstruction from mel frames via the mel pseudo-inverse.

    Starts from zero phase, so the result is deterministic.
    """
    if iters <= 0:
        raise DSPError("griffin_lim needs at least one iteration")
    mel = frames.frames
    if frames.scale == "normalized01":
        if stats is None:
            raise DSPError("normalized01 frames need MelStats to invert")
        mel = np.exp(stats.denormalize(mel))
    elif frames.scale == "log":
        mel = np.exp(mel)
    window, hop = frames.window_size, frames.hop_size
    mag = mel_to_linear(mel, sr, window)
    spec = mag.astype(np.complex128)
    y = istft(spec, window, hop)
    for _ in range(iters - 1):
        rebuilt = stft(y, window, hop)
        phase = np.exp(1j * np.angle(rebuilt))
        y = istft(mag * phase, window, hop)
    return AudioClip(np.clip(y, -1.0, 1.0), sr)


# ------------------------------------------------------------------- content proxy


def cepstral_content(log_mel: np.ndarray, dim: int = 32, n_ceps: int = 13, seed: int = 1234) -> np.ndarray:
    """Cepstral stand-in for self-supervised content features.

    13 DCT-II cepstra of the log mel, mean/variance normalised per utterance,
    lifted to ``dim`` channels by a fixed seeded Gaussian projection.
    """
    ceps = dct(np.asarray(log_mel, dtype=np.float64), type=2, norm="ortho", axis=1)[:, :n_ceps]
    ceps = (ceps - ceps.mean(axis=0)) / (ceps.std(axis=0) + 1e-5)
    proj = np.random.default_rng(seed).standard_normal((n_ceps, dim)) / np.sqrt(n_ceps)
    return (ceps @ proj).astype(np.float32)
