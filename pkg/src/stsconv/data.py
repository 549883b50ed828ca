"""Corpus preparation: synthetic corpus writer and per-utterance feature extraction."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import (
    AudioClip,
    ManifestEntry,
    load_content_features,
    load_manifest,
    load_timbre,
    load_wav,
    random_synth_spec,
    save_timbre,
    save_wav,
    synth_pair,
    timbre_for_speaker,
    write_manifest,
)
from .config import RunConfig
from .dsp import (
    HOP,
    LOG_FLOOR,
    WINDOW,
    DSPError,
    MelStats,
    cepstral_content,
    energy_contour,
    estimate_f0,
    extract_rhythm,
    quantize_f0,
    remove_silence,
    stft_mel,
)
from .model import ModelInputs

__all__ = ["Utterance", "DataError", "write_synthetic_corpus", "speech_streams", "prepare_entry", "prepare_split",
           "corpus_stats", "to_inputs"]


class DataError(ValueError):
    pass


@dataclass
class Utterance:
    """Silence-trimmed, frame-aligned features of one manifest entry."""

    id: str
    split: str
    singing_linear: np.ndarray  # (T, M)
    singing_log: np.ndarray  # (T, M)
    f0_hz: np.ndarray  # (T,) reference F0 (ground truth when the meta sidecar has it)
    f0_source: str  # "meta" | "estimated"
    rhythm: np.ndarray  # (T,)
    speech_content: np.ndarray  # (N, C)
    speech_rhythm: np.ndarray  # (N_s,)
    singing_content: np.ndarray  # (T, C)
    timbre: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.f0_hz.shape[0]


def write_synthetic_corpus(out_dir, n: int, seed: int = 0, splits=(0.8, 0.1, 0.1),
                           n_speakers: int = 3, timbre_dim: int = 256) -> Path:
    """Render ``n`` synthetic speech/singing pairs plus manifest, timbre and meta files.

    Returns the manifest path.  Split counts are ``round(n * fraction)`` for
    train and valid; test takes the remainder.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train = int(round(n * splits[0]))
    n_valid = int(round(n * splits[1]))
    entries = []
    speakers = set()
    for i in range(n):
        spk = f"spk{i % n_speakers}"
        spec = random_synth_spec(rng, speaker_id=spk)
        pair = synth_pair(seed * 100003 + i, spec)
        uid = f"utt{i:04d}"
        split = "train" if i < n_train else ("valid" if i < n_train + n_valid else "test")
        speech_p, sing_p = out / "wav" / f"{uid}_speech.wav", out / "wav" / f"{uid}_singing.wav"
        save_wav(speech_p, pair.speech, subtype="FLOAT")
        save_wav(sing_p, pair.singing, subtype="FLOAT")
        meta_p = out / "wav" / f"{uid}.meta.json"
        meta_p.write_text(json.dumps({
            "synth": spec.to_json(),
            "seed": seed * 100003 + i,
            "window": WINDOW,
            "hop": HOP,
            "frame_f0": pair.frame_f0(WINDOW, HOP).round(6).tolist(),
        }))
        if spk not in speakers:
            save_timbre(out, timbre_for_speaker(spk, timbre_dim))
            speakers.add(spk)
        entries.append(ManifestEntry(uid, speech_p, sing_p, spk, split, meta_path=meta_p))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest


def _log(mel: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(mel, LOG_FLOOR))


def speech_streams(speech: AudioClip, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Cepstral content proxy and rhythm curve of silence-trimmed speech."""
    sp_mel = stft_mel(speech, cfg.n_mels)
    sp_t, sp_log = remove_silence(sp_mel, _log(sp_mel.frames))
    rhythm = extract_rhythm(energy_contour(sp_t), cfg.rhythm_beta, cfg.rhythm_epsilon, cfg.rhythm_sigma).r
    return cepstral_content(sp_log, cfg.content_dim), rhythm


def prepare_entry(entry: ManifestEntry, root, cfg: RunConfig) -> Utterance:
    """Extract every stream the model needs from one manifest entry."""
    try:
        sing = load_wav(entry.singing_path, cfg.sample_rate)
        speech = load_wav(entry.speech_path, cfg.sample_rate)
        sing_mel = stft_mel(sing, cfg.n_mels)
        T = len(sing_mel)
        f0, source = None, "estimated"
        if entry.meta_path is not None:
            meta = json.loads(Path(entry.meta_path).read_text())
            if "frame_f0" in meta:
                f0 = np.asarray(meta["frame_f0"], dtype=np.float64)
                source = "meta"
                if f0.shape[0] != T:
                    raise DataError(f"meta F0 has {f0.shape[0]} frames, audio has {T}")
        if f0 is None:
            f0 = estimate_f0(sing)
        mel_t, log_t, f0_t = remove_silence(sing_mel, _log(sing_mel.frames), f0)
        rhythm = extract_rhythm(energy_contour(mel_t), cfg.rhythm_beta, cfg.rhythm_epsilon, cfg.rhythm_sigma).r

        content, sp_rhythm = speech_streams(speech, cfg)
        if entry.content_feature_path is not None:
            content = load_content_features(entry.content_feature_path, cfg.content_dim).astype(np.float64)
        timbre = load_timbre(root, entry.timbre_id, cfg.timbre_dim).vector
    except (DSPError, DataError, ValueError, OSError) as exc:
        raise DataError(f"{entry.id}: {exc}") from exc
    return Utterance(entry.id, entry.split, mel_t.frames, log_t, f0_t, source, rhythm, content, sp_rhythm,
                     cepstral_content(log_t, cfg.content_dim), timbre)


def prepare_split(manifest_path, cfg: RunConfig, split: str | None = "train") -> list[Utterance]:
    manifest = load_manifest(manifest_path)
    entries = manifest.entries if split is None else manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} of {manifest_path} is empty")
    return [prepare_entry(e, manifest.root, cfg) for e in entries]


def corpus_stats(utts) -> MelStats:
    return MelStats.from_mels([u.singing_log for u in utts])


def to_inputs(utt: Utterance, cfg: RunConfig, stats: MelStats | None = None) -> ModelInputs:
    """Model-facing view of an utterance; ``stats`` adds the normalised training target."""
    zero_shot = cfg.mode == "zero_shot"
    return ModelInputs(
        id=utt.id,
        content=utt.singing_content if zero_shot else utt.speech_content,
        pitch_bins=quantize_f0(utt.f0_hz),
        timbre=utt.timbre,
        rhythm=utt.rhythm,
        target=None if stats is None else stats.normalize(utt.singing_log),
        source_rhythm=utt.rhythm if zero_shot else utt.speech_rhythm,
    )
