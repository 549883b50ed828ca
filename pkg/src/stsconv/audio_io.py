"""Audio and feature ingestion, dataset manifests and the synthetic pair generator.

Feature files use a small little-endian container so that other tools can read
them without numpy::

    offset  size   field
    0       4      magic  b"STSF"
    4       4      u32    rows (frames)
    8       4      u32    cols (feature dimension)
    12      4*r*c  float32 payload, row-major

Manifests are line-delimited JSON; one object per utterance with the keys
``id``, ``speech_path``, ``singing_path``, ``timbre_id``, ``split`` and the
optional ``content_feature_path`` / ``meta_path``.  Relative paths resolve
against the manifest's directory.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

__all__ = [
    "AudioClip",
    "AudioError",
    "FeatureFileError",
    "ManifestError",
    "ManifestEntry",
    "DatasetManifest",
    "TimbreEmbedding",
    "SynthSpec",
    "SynthPair",
    "load_wav",
    "save_wav",
    "load_content_features",
    "save_content_features",
    "load_manifest",
    "write_manifest",
    "timbre_for_speaker",
    "save_timbre",
    "load_timbre",
    "synth_pair",
    "random_synth_spec",
    "interpolate_frames",
    "midi_to_hz",
]

DEFAULT_SAMPLE_RATE = 24000
FEATURE_MAGIC = b"STSF"
SPLITS = ("train", "valid", "test")


class AudioError(ValueError):
    pass


class FeatureFileError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class TimbreEmbedding:
    vector: np.ndarray
    speaker_id: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("timbre embedding contains non-finite entries")


# --------------------------------------------------------------------------- wav


def resampled_length(n: int, orig_sr: int, target_sr: int) -> int:
    return int(round(n * target_sr / orig_sr))


def load_wav(path, target_sr: int | None = DEFAULT_SAMPLE_RATE) -> AudioClip:
    """Read a PCM16 / PCM32 / float WAV file as a mono clip in [-1, 1].

    If ``target_sr`` is given and differs from the file rate the clip is
    resampled with a polyphase filter and trimmed to
    ``round(n * target_sr / sr)`` samples.
    """
    try:
        sr, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises bare ValueErrors for bad headers
        raise AudioError(f"cannot read {path}: {exc}") from exc

    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV encoding {data.dtype} in {path}")
    if x.ndim > 1:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioError(f"empty audio: {path}")

    if target_sr is not None and target_sr != sr:
        n_out = resampled_length(x.size, sr, target_sr)
        g = gcd(int(sr), int(target_sr))
        y = resample_poly(x, target_sr // g, sr // g)
        if y.size < n_out:
            y = np.pad(y, (0, n_out - y.size))
        x = y[:n_out]
        sr = target_sr
    return AudioClip(np.clip(x, -1.0, 1.0), int(sr))


def save_wav(path, clip: AudioClip, subtype: str = "PCM_16") -> None:
    x = np.clip(clip.samples, -1.0, 1.0)
    if subtype == "PCM_16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif subtype == "FLOAT":
        data = x.astype(np.float32)
    else:
        raise AudioError(f"unsupported subtype {subtype!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), clip.sample_rate, data)


# ------------------------------------------------------------------ feature files


def save_content_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise FeatureFileError(f"feature matrix must be 2-D, got shape {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_content_features(path, expected_dim: int | None = 32) -> np.ndarray:
    """Read a feature file written by :func:`save_content_features`.

    Returns a float32 ``(frames, dim)`` matrix.  Raises
    :class:`FeatureFileError` on a bad magic, truncated payload or when the
    stored dimension differs from ``expected_dim``.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: not a feature file (bad magic)")
    rows, cols = struct.unpack("<II", raw[4:12])
    payload = raw[12:]
    if len(payload) != 4 * rows * cols:
        raise FeatureFileError(
            f"{path}: corrupt payload, header says {rows}x{cols} but found {len(payload)} bytes"
        )
    if expected_dim is not None and cols != expected_dim:
        raise FeatureFileError(
            f"{path}: dimension mismatch, file has {cols} columns but config expects {expected_dim}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


def interpolate_frames(x: np.ndarray, length: int) -> np.ndarray:
    """Linearly resample a ``(T, C)`` (or ``(T,)``) sequence to ``length`` frames."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    T = x.shape[0]
    if T == 0 or length <= 0:
        raise ValueError("cannot interpolate an empty sequence")
    if T == 1:
        out = np.repeat(x, length, axis=0)
    else:
        src = np.linspace(0.0, T - 1, length)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, T - 1)
        frac = (src - lo)[:, None]
        out = x[lo] * (1.0 - frac) + x[hi] * frac
    return out[:, 0] if squeeze else out


# ---------------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    id: str
    speech_path: Path
    singing_path: Path
    timbre_id: str
    split: str
    content_feature_path: Path | None = None
    meta_path: Path | None = None

    def to_json(self, root: Path) -> dict:
        def rel(p):
            if p is None:
                return None
            p = Path(p)
            try:
                return str(p.relative_to(root))
            except ValueError:
                return str(p)

        out = {
            "id": self.id,
            "speech_path": rel(self.speech_path),
            "singing_path": rel(self.singing_path),
            "timbre_id": self.timbre_id,
            "split": self.split,
        }
        if self.content_feature_path is not None:
            out["content_feature_path"] = rel(self.content_feature_path)
        if self.meta_path is not None:
            out["meta_path"] = rel(self.meta_path)
        return out


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def __len__(self):
        return len(self.entries)


_REQUIRED_KEYS = ("id", "speech_path", "singing_path", "timbre_id", "split")
_OPTIONAL_KEYS = ("content_feature_path", "meta_path")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
        missing = [k for k in _REQUIRED_KEYS if k not in obj]
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing keys {missing}")
        unknown = set(obj) - set(_REQUIRED_KEYS) - set(_OPTIONAL_KEYS)
        if unknown:
            raise ManifestError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
        if obj["split"] not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: split must be one of {SPLITS}, got {obj['split']!r}")

        def resolve(key):
            value = obj.get(key)
            if value is None:
                return None
            p = Path(value)
            p = p if p.is_absolute() else root / p
            if not p.exists():
                raise ManifestError(f"{path}:{lineno}: {key} does not exist: {p}")
            return p

        entries.append(
            ManifestEntry(
                id=str(obj["id"]),
                speech_path=resolve("speech_path"),
                singing_path=resolve("singing_path"),
                timbre_id=str(obj["timbre_id"]),
                split=obj["split"],
                content_feature_path=resolve("content_feature_path"),
                meta_path=resolve("meta_path"),
            )
        )
    return DatasetManifest(entries, root)


def write_manifest(path, entries) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json(root)) + "\n")


# ------------------------------------------------------------------------ timbre


def timbre_for_speaker(speaker_id: str, dim: int = 256) -> TimbreEmbedding:
    """Fixed pseudo-random unit vector for a speaker (stand-in for a speaker encoder)."""
    rng = np.random.default_rng(zlib.crc32(speaker_id.encode("utf-8")))
    v = rng.standard_normal(dim)
    return TimbreEmbedding(v / np.linalg.norm(v), speaker_id)


def _timbre_path(root: Path, speaker_id: str) -> Path:
    return Path(root) / "timbre" / f"{speaker_id}.feat"


def save_timbre(root, emb: TimbreEmbedding) -> Path:
    p = _timbre_path(root, emb.speaker_id)
    save_content_features(p, emb.vector[None, :])
    return p


def load_timbre(root, speaker_id: str, dim: int = 256) -> TimbreEmbedding:
    p = _timbre_path(root, speaker_id)
    if not p.exists():
        return timbre_for_speaker(speaker_id, dim)
    return TimbreEmbedding(load_content_features(p, expected_dim=dim)[0].astype(np.float64), speaker_id)


# ----------------------------------------------------------------- synthetic data

# Vowel-like formant triples (Hz) standing in for phone identities.
PHONE_FORMANTS = np.array(
    [
        [800, 1200, 2500],
        [300, 2300, 3000],
        [350, 800, 2400],
        [500, 1800, 2500],
        [500, 900, 2400],
        [700, 1700, 2500],
        [450, 1400, 1700],
        [600, 1000, 2400],
    ],
    dtype=np.float64,
)
NOTE_POOL = (57, 60, 62, 64, 67, 69, 72)


def midi_to_hz(midi) -> np.ndarray:
    return 440.0 * 2.0 ** ((np.asarray(midi, dtype=np.float64) - 69.0) / 12.0)


@dataclass
class SynthSpec:
    phones: list[int]
    notes: list[int]
    speech_durations: list[float]
    singing_durations: list[float]
    speaker_id: str = "spk0"
    sample_rate: int = DEFAULT_SAMPLE_RATE
    lead_silence: float = 0.1
    tail_silence: float = 0.1
    speech_f0: float = 140.0

    def validate(self):
        if len(self.notes) == 0 or len(self.phones) == 0:
            raise ValueError("empty note sequence")
        n = len(self.phones)
        if not (len(self.notes) == len(self.speech_durations) == len(self.singing_durations) == n):
            raise ValueError("phones, notes and durations must have equal length")
        if min(self.speech_durations) <= 0 or min(self.singing_durations) <= 0:
            raise ValueError("durations must be positive")
        if any(p < 0 or p >= len(PHONE_FORMANTS) for p in self.phones):
            raise ValueError(f"phone ids must lie in [0, {len(PHONE_FORMANTS)})")

    def to_json(self) -> dict:
        return {
            "phones": list(map(int, self.phones)),
            "notes": list(map(int, self.notes)),
            "speech_durations": list(map(float, self.speech_durations)),
            "singing_durations": list(map(float, self.singing_durations)),
            "speaker_id": self.speaker_id,
            "sample_rate": self.sample_rate,
            "lead_silence": self.lead_silence,
            "tail_silence": self.tail_silence,
            "speech_f0": self.speech_f0,
        }


@dataclass
class SynthPair:
    speech: AudioClip
    singing: AudioClip
    singing_f0: np.ndarray  # Hz per sample, 0 where silent
    singing_segments: list[tuple[int, float, float]]
    speech_segments: list[tuple[int, float, float]]
    spec: SynthSpec = field(repr=False, default=None)

    def frame_f0(self, window: int = 512, hop: int = 128) -> np.ndarray:
        """Ground-truth F0 sampled at STFT frame centres (0 = unvoiced)."""
        n = len(self.singing)
        n_frames = (n - window) // hop + 1
        centers = np.arange(n_frames) * hop + window // 2
        return self.singing_f0[centers]


def _speaker_tilt(speaker_id: str) -> float:
    return 0.6 + 0.8 * (zlib.crc32(speaker_id.encode()) % 1000) / 1000.0


def _envelope(n: int, sr: int, ramp: float) -> np.ndarray:
    r = max(1, min(int(round(ramp * sr)), n // 2))
    env = np.ones(n)
    up = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, r, endpoint=False))
    env[:r] = up
    env[n - r:] = up[::-1]
    return env


def _render(phones, durations, f0_fn, spec: SynthSpec, ramp: float, rng) -> tuple:
    sr = spec.sample_rate
    lead = int(round(spec.lead_silence * sr))
    tail = int(round(spec.tail_silence * sr))
    bounds = np.round(np.concatenate([[0.0], np.cumsum(durations)]) * sr).astype(int) + lead
    total = bounds[-1] + tail
    t = np.arange(total) / sr
    f0 = np.zeros(total)
    amp = np.zeros(total)
    segments = []
    formants = np.zeros((total, 3))
    for i, ph in enumerate(phones):
        a, b = bounds[i], bounds[i + 1]
        f0[a:b] = f0_fn(i, t[a:b])
        amp[a:b] = _envelope(b - a, sr, ramp)
        formants[a:b] = PHONE_FORMANTS[ph]
        segments.append((int(ph), a / sr, b / sr))

    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    tilt = _speaker_tilt(spec.speaker_id)
    y = np.zeros(total)
    nyq = 0.45 * sr
    for h in range(1, 40):
        fh = h * f0
        live = (fh > 0) & (fh < min(nyq, 8000.0))
        if not live.any():
            continue
        gain = np.zeros(total)
        for k, bw in enumerate((90.0, 120.0, 160.0)):
            gain += (0.9 ** k) * np.exp(-0.5 * ((fh - formants[:, k]) / bw) ** 2)
        # glottal-like 1/h source roll-off shaped by the formant bumps
        gain = (gain + 0.15) * (np.maximum(fh, 1.0) / 1000.0) ** (-0.3 * tilt) / h
        y += np.where(live, gain, 0.0) * np.sin(h * phase)
    y *= amp
    peak = np.max(np.abs(y))
    if peak > 0:
        y *= 0.5 / peak
    y += 1e-4 * rng.standard_normal(total)
    # f0 is only meaningful where the tone is actually sounding
    f0 = np.where(amp >= 0.5, f0, 0.0)
    return AudioClip(np.clip(y, -1.0, 1.0), sr), f0, segments


def synth_pair(seed: int, spec: SynthSpec) -> SynthPair:
    """Render a deterministic (speech, singing) pair for ``spec``.

    Both clips carry the same phone sequence (formant patterns).  The singing
    clip holds each phone on its note's F0 for ``singing_durations``; the speech
    clip uses ``speech_durations`` and a flat, slowly drifting F0.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    note_hz = midi_to_hz(spec.notes)
    sing, sing_f0, sing_segments = _render(
        spec.phones, spec.singing_durations, lambda i, t: note_hz[i], spec, 0.03, rng
    )
    drift_phase = rng.uniform(0, 2 * np.pi)
    speech, _, speech_segments = _render(
        spec.phones,
        spec.speech_durations,
        lambda i, t: spec.speech_f0 * (1.0 + 0.04 * np.sin(2 * np.pi * 0.7 * t + drift_phase)),
        spec,
        0.015,
        rng,
    )
    return SynthPair(speech, sing, sing_f0, sing_segments, speech_segments, spec)


def random_synth_spec(rng: np.random.Generator, speaker_id: str | None = None,
                      n_phones: tuple[int, int] = (3, 5)) -> SynthSpec:
    n = int(rng.integers(n_phones[0], n_phones[1] + 1))
    phones = rng.choice(len(PHONE_FORMANTS), size=n, replace=True).tolist()
    notes = rng.choice(NOTE_POOL, size=n, replace=True).tolist()
    speech = rng.uniform(0.07, 0.13, size=n).round(3).tolist()
    singing = rng.uniform(0.12, 0.28, size=n).round(3).tolist()
    if speaker_id is None:
        speaker_id = f"spk{int(rng.integers(0, 3))}"
    speech_f0 = 110.0 + 15.0 * (zlib.crc32(speaker_id.encode()) % 5)
    return SynthSpec(phones, notes, speech, singing, speaker_id=speaker_id, speech_f0=speech_f0)
