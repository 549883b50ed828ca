"""Objective scores: log-spectral distance, raw chroma accuracy, rhythm distance."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import AudioClip
from .dsp import PitchContour, RhythmCurve, SpectralFrameSeq, energy_contour, extract_rhythm, stft_mel

__all__ = [
    "MetricError",
    "lsd",
    "chroma_distance_cents",
    "rca",
    "rhythm_of",
    "rrd",
    "UtteranceScore",
    "EvalReport",
]


class MetricError(ValueError):
    pass


def _frames(x) -> np.ndarray:
    return np.asarray(x.frames if isinstance(x, SpectralFrameSeq) else x, dtype=np.float64)


def lsd(pred, ref) -> float:
    """Mean over frames of the Euclidean distance between log-spectral frames."""
    p, r = _frames(pred), _frames(ref)
    if p.shape != r.shape:
        raise MetricError(f"lsd: shapes {p.shape} and {r.shape} differ (truncate first)")
    if p.shape[0] == 0:
        raise MetricError("lsd: zero frames")
    return float(np.mean(np.sqrt(np.sum((p - r) ** 2, axis=1))))


def chroma_distance_cents(pred_hz, ref_hz) -> np.ndarray:
    """Distance in cents after folding octaves, in [0, 600]."""
    cents = 1200.0 * np.log2(np.asarray(pred_hz, dtype=np.float64) / np.asarray(ref_hz, dtype=np.float64))
    return np.abs(cents - 1200.0 * np.round(cents / 1200.0))


def rca(pred_f0, ref_f0, tolerance_cents: float = 50.0) -> float:
    """Raw chroma accuracy over reference-voiced frames.

    A voiced reference frame scores when the prediction is voiced and its
    octave-folded distance is within ``tolerance_cents``.
    """
    p = np.asarray(pred_f0.f0_hz if isinstance(pred_f0, PitchContour) else pred_f0, dtype=np.float64)
    r = np.asarray(ref_f0.f0_hz if isinstance(ref_f0, PitchContour) else ref_f0, dtype=np.float64)
    if p.shape != r.shape:
        raise MetricError(f"rca: lengths {p.shape} and {r.shape} differ")
    voiced = r > 0
    if not voiced.any():
        raise MetricError("rca: reference has no voiced frames")
    pv, rv = p[voiced], r[voiced]
    hit = np.zeros(rv.shape, dtype=bool)
    ok = pv > 0
    hit[ok] = chroma_distance_cents(pv[ok], rv[ok]) <= tolerance_cents
    return float(hit.mean())


def rhythm_of(x, beta: float = 400.0, epsilon: float = 1e-8, smooth_sigma: float = 1.0) -> np.ndarray:
    """Reduce audio, spectral frames or an existing curve to a rhythm curve.

    1-D arrays are taken to be rhythm curves already; 2-D arrays are read as
    linear-magnitude frames.
    """
    if isinstance(x, RhythmCurve):
        return x.r
    if isinstance(x, AudioClip):
        x = stft_mel(x)
    if isinstance(x, SpectralFrameSeq):
        frames = np.exp(x.frames) if x.scale == "log" else x.frames
        if x.scale == "normalized01":
            raise MetricError("rrd: denormalise mel frames before computing rhythm")
        return extract_rhythm(energy_contour(frames), beta, epsilon, smooth_sigma).r
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x
    return extract_rhythm(energy_contour(x), beta, epsilon, smooth_sigma).r


def rrd(pred, ref, beta: float = 400.0, epsilon: float = 1e-8, smooth_sigma: float = 1.0) -> float:
    """Euclidean distance between rhythm curves over their common prefix, divided by sqrt(T)."""
    a = rhythm_of(pred, beta, epsilon, smooth_sigma)
    b = rhythm_of(ref, beta, epsilon, smooth_sigma)
    T = min(a.shape[0], b.shape[0])
    if T == 0:
        raise MetricError("rrd: empty overlap")
    return float(np.linalg.norm(a[:T] - b[:T]) / np.sqrt(T))


@dataclass
class UtteranceScore:
    id: str
    lsd: float
    rca: float
    rrd: float
    frame_accuracy: float | None = None


@dataclass
class EvalReport:
    lsd: float
    rca: float
    rrd: float
    utterances: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (id, reason)
    frame_accuracy: float | None = None

    @classmethod
    def from_scores(cls, scores, skipped=()) -> "EvalReport":
        scores = list(scores)
        if not scores:
            raise MetricError("no utterances were scored")
        mean = lambda k: float(np.mean([getattr(s, k) for s in scores]))
        fa = [s.frame_accuracy for s in scores if s.frame_accuracy is not None]
        return cls(mean("lsd"), mean("rca"), mean("rrd"), scores, list(skipped),
                   float(np.mean(fa)) if fa else None)

    def to_dict(self) -> dict:
        return {
            "lsd": self.lsd,
            "rca": self.rca,
            "rrd": self.rrd,
            "frame_accuracy": self.frame_accuracy,
            "count": len(self.utterances),
            "utterances": [asdict(s) for s in self.utterances],
            "skipped": [{"id": i, "reason": r} for i, r in self.skipped],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "lsd", "rca", "rrd", "frame_accuracy"])
            for s in self.utterances:
                w.writerow([s.id, f"{s.lsd:.6f}", f"{s.rca:.6f}", f"{s.rrd:.6f}",
                            "" if s.frame_accuracy is None else f"{s.frame_accuracy:.6f}"])
            w.writerow(["mean", f"{self.lsd:.6f}", f"{self.rca:.6f}", f"{self.rrd:.6f}",
                        "" if self.frame_accuracy is None else f"{self.frame_accuracy:.6f}"])
