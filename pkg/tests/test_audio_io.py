from __future__ import annotations

import json
import struct

import numpy as np
import pytest
from scipy.io import wavfile
from scipy.signal import argrelmin

from stsconv import dsp
from stsconv.audio_io import (
    AudioClip,
    AudioError,
    FeatureFileError,
    ManifestError,
    SynthSpec,
    TimbreEmbedding,
    interpolate_frames,
    load_content_features,
    load_manifest,
    load_timbre,
    load_wav,
    midi_to_hz,
    save_content_features,
    save_timbre,
    save_wav,
    synth_pair,
    timbre_for_speaker,
)

HOP_S = 128 / 24000


# --------------------------------------------------------------------- clips


def test_clip_invariants():
    with pytest.raises(AudioError):
        AudioClip(np.zeros(4), 0)
    with pytest.raises(AudioError):
        AudioClip(np.array([0.0, np.nan]))
    assert AudioClip(np.zeros(48000)).duration == 2.0


def test_pcm16_peak_normalizes_to_one(tmp_path):
    data = np.array([0, 16384, 32767, -32768], dtype=np.int16)
    wavfile.write(tmp_path / "a.wav", 24000, data)
    clip = load_wav(tmp_path / "a.wav")
    assert abs(clip.samples.max() - 1.0) <= 1.0 / 32768
    assert clip.samples.min() == -1.0
    assert clip.sample_rate == 24000


def test_float_wav_and_stereo_downmix(tmp_path):
    data = np.array([[0.5, -0.5], [0.25, 0.25]], dtype=np.float32)
    wavfile.write(tmp_path / "s.wav", 24000, data)
    np.testing.assert_allclose(load_wav(tmp_path / "s.wav").samples, [0.0, 0.25])


def test_empty_wav_is_rejected(tmp_path):
    wavfile.write(tmp_path / "e.wav", 24000, np.zeros(0, dtype=np.int16))
    with pytest.raises(AudioError, match="empty audio"):
        load_wav(tmp_path / "e.wav")


def test_unreadable_and_unsupported(tmp_path):
    (tmp_path / "junk.wav").write_bytes(b"not a wav at all")
    with pytest.raises(AudioError):
        load_wav(tmp_path / "junk.wav")
    wavfile.write(tmp_path / "i64.wav", 24000, np.zeros(10, dtype=np.int64))
    with pytest.raises(AudioError):
        load_wav(tmp_path / "i64.wav")


@pytest.mark.parametrize("n", [1, 999, 22050, 44101])
def test_resampled_length(tmp_path, n):
    x = (0.1 * np.sin(np.arange(n) * 0.01) * 32767).astype(np.int16)
    wavfile.write(tmp_path / "r.wav", 22050, x)
    clip = load_wav(tmp_path / "r.wav", 24000)
    # oracle: exact rational arithmetic, rounded half to even like Python
    from fractions import Fraction

    expected = round(Fraction(n * 24000, 22050))
    assert len(clip) == expected
    assert clip.sample_rate == 24000


def test_resampling_keeps_tone_frequency(tmp_path):
    sr = 22050
    t = np.arange(sr) / sr
    wavfile.write(tmp_path / "t.wav", sr, (0.5 * np.sin(2 * np.pi * 1000 * t)).astype(np.float32))
    clip = load_wav(tmp_path / "t.wav", 24000)
    spec = np.abs(np.fft.rfft(clip.samples))
    assert abs(np.argmax(spec) * 24000 / len(clip) - 1000) < 2


def test_wav_round_trip_within_one_step(tmp_path, rng):
    x = rng.uniform(-1, 1, 4000)
    save_wav(tmp_path / "w.wav", AudioClip(x))
    y = load_wav(tmp_path / "w.wav").samples
    assert np.max(np.abs(x - y)) <= 1.0 / 32768 + 1e-12
    save_wav(tmp_path / "f.wav", AudioClip(x), "FLOAT")
    np.testing.assert_allclose(load_wav(tmp_path / "f.wav").samples, x, atol=1e-7)


# ----------------------------------------------------------------- features


def test_feature_round_trip_bit_identical(tmp_path, rng):
    m = rng.standard_normal((10, 32)).astype(np.float32)
    save_content_features(tmp_path / "c.feat", m)
    out = load_content_features(tmp_path / "c.feat")
    assert out.shape == (10, 32)
    assert out.tobytes() == m.tobytes()


def test_feature_byte_layout(tmp_path):
    m = np.arange(6, dtype=np.float32).reshape(2, 3)
    save_content_features(tmp_path / "c.feat", m)
    raw = (tmp_path / "c.feat").read_bytes()
    assert raw[:4] == b"STSF"
    assert struct.unpack("<II", raw[4:12]) == (2, 3)
    assert np.frombuffer(raw[12:], "<f4").tolist() == list(range(6))


def test_feature_dimension_mismatch(tmp_path):
    save_content_features(tmp_path / "c.feat", np.zeros((4, 33), np.float32))
    with pytest.raises(FeatureFileError, match="dimension mismatch"):
        load_content_features(tmp_path / "c.feat", expected_dim=32)


def test_feature_corrupt_files(tmp_path):
    save_content_features(tmp_path / "c.feat", np.zeros((4, 32), np.float32))
    raw = (tmp_path / "c.feat").read_bytes()
    (tmp_path / "t.feat").write_bytes(raw[:-3])
    with pytest.raises(FeatureFileError, match="corrupt"):
        load_content_features(tmp_path / "t.feat")
    (tmp_path / "m.feat").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FeatureFileError, match="magic"):
        load_content_features(tmp_path / "m.feat")


def test_interpolate_frames_endpoints_and_linearity():
    x = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    y = interpolate_frames(x, 5)
    np.testing.assert_allclose(y[:, 0], [0, 1, 2, 3, 4])
    np.testing.assert_allclose(interpolate_frames(np.array([7.0]), 3), [7, 7, 7])
    with pytest.raises(ValueError):
        interpolate_frames(np.zeros((0, 2)), 3)


# ---------------------------------------------------------------- manifests


def _touch(p):
    p.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(p, 24000, np.zeros(10, np.int16))
    return p


def _manifest(tmp_path, rows):
    path = tmp_path / "manifest.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path


def test_manifest_order_and_relative_paths(tmp_path):
    rows = []
    for i in (3, 1, 2):
        _touch(tmp_path / "wav" / f"{i}.wav")
        rows.append({"id": f"u{i}", "speech_path": f"wav/{i}.wav", "singing_path": f"wav/{i}.wav",
                     "timbre_id": "spk0", "split": "train" if i != 2 else "test"})
    man = load_manifest(_manifest(tmp_path, rows))
    assert [e.id for e in man.entries] == ["u3", "u1", "u2"]
    assert [e.id for e in man.split("test")] == ["u2"]
    assert man.entries[0].speech_path == tmp_path / "wav" / "3.wav"


@pytest.mark.parametrize("row, match", [
    ({"speech_path": "wav/missing.wav"}, "does not exist"),
    ({"split": "dev"}, "split"),
    ({"extra": 1}, "unknown keys"),
    ({"timbre_id": None, "__drop__": "timbre_id"}, "missing keys"),
])
def test_manifest_rejects_bad_rows(tmp_path, row, match):
    _touch(tmp_path / "wav" / "a.wav")
    base = {"id": "a", "speech_path": "wav/a.wav", "singing_path": "wav/a.wav", "timbre_id": "spk0",
            "split": "train"}
    drop = row.pop("__drop__", None)
    base.update(row)
    if drop:
        base.pop(drop)
    with pytest.raises(ManifestError, match=match):
        load_manifest(_manifest(tmp_path, [base]))


def test_manifest_invalid_json(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(ManifestError, match="invalid JSON"):
        load_manifest(p)


# ------------------------------------------------------------------- timbre


def test_timbre_is_fixed_per_speaker_and_persisted(tmp_path):
    a = timbre_for_speaker("alice")
    assert a.vector.shape == (256,)
    np.testing.assert_allclose(np.linalg.norm(a.vector), 1.0)
    np.testing.assert_array_equal(a.vector, timbre_for_speaker("alice").vector)
    assert not np.allclose(a.vector, timbre_for_speaker("bob").vector)
    save_timbre(tmp_path, a)
    b = load_timbre(tmp_path, "alice")
    np.testing.assert_allclose(b.vector, a.vector, atol=1e-7)
    with pytest.raises(FeatureFileError):
        load_timbre(tmp_path, "alice", dim=128)
    with pytest.raises(ValueError):
        TimbreEmbedding(np.array([np.inf]), "x")


# --------------------------------------------------------------- synthesis


def _spec(**kw):
    base = dict(phones=[0, 1, 2], notes=[60, 69, 64], speech_durations=[0.1, 0.1, 0.1],
                singing_durations=[0.2, 0.4, 0.2])
    base.update(kw)
    return SynthSpec(**base)


def test_synth_pair_is_deterministic():
    a, b = synth_pair(7, _spec()), synth_pair(7, _spec())
    assert a.singing.samples.tobytes() == b.singing.samples.tobytes()
    assert a.speech.samples.tobytes() == b.speech.samples.tobytes()
    c = synth_pair(8, _spec())
    assert a.singing.samples.tobytes() != c.singing.samples.tobytes()


def test_synth_pair_rejects_bad_specs():
    with pytest.raises(ValueError, match="empty"):
        synth_pair(0, _spec(phones=[], notes=[], speech_durations=[], singing_durations=[]))
    with pytest.raises(ValueError):
        synth_pair(0, _spec(notes=[60]))
    with pytest.raises(ValueError):
        synth_pair(0, _spec(singing_durations=[0.2, 0.0, 0.2]))


def test_midi_69_segment_is_440_hz():
    assert midi_to_hz(69) == 440.0
    pair = synth_pair(0, _spec())
    sr = pair.singing.sample_rate
    # middle of the 0.4 s note, away from the amplitude ramps
    a, b = int((0.1 + 0.2 + 0.1) * sr), int((0.1 + 0.6 - 0.1) * sr)
    seg = pair.singing.samples[a:b]
    # oracle: autocorrelation peak of the pure segment over the 80..1000 Hz lag range
    ac = np.correlate(seg, seg, "full")[seg.size - 1:]
    lo, hi = sr // 1000, sr // 80
    lag = lo + int(np.argmax(ac[lo:hi]))
    y0, y1, y2 = ac[lag - 1], ac[lag], ac[lag + 1]
    frac = 0.5 * (y0 - y2) / (y0 - 2 * y1 + y2)
    oracle_hz = sr / (lag + frac)
    assert abs(oracle_hz - 440.0) <= 1.0
    f0 = dsp.estimate_f0(AudioClip(seg, sr))
    assert abs(np.median(f0[f0 > 0]) - 440.0) <= 1.0


def test_segment_boundaries_within_one_hop():
    spec = _spec()
    pair = synth_pair(0, spec)
    # oracle: cumulative durations after the lead silence
    bounds = spec.lead_silence + np.cumsum([0.0] + spec.singing_durations)
    np.testing.assert_allclose([s[1] for s in pair.singing_segments] + [pair.singing_segments[-1][2]],
                               bounds, atol=1 / 24000)

    e = dsp.energy_contour(dsp.stft_mel(pair.singing))
    centres = (np.arange(e.size) * 128 + 256) / 24000
    keep = dsp.silence_mask(e)
    # edges between the last silent and first sounding frame
    onset = centres[keep][0] - HOP_S / 2
    offset = centres[keep][-1] + HOP_S / 2
    assert abs(onset - bounds[0]) <= HOP_S
    assert abs(offset - bounds[-1]) <= HOP_S
    dips = [i for i in argrelmin(e, order=10)[0] if keep[i] and e[i] < 0.25 * e.max()]
    assert len(dips) == 2
    np.testing.assert_allclose(centres[dips], bounds[1:3], atol=HOP_S)


def test_speech_f0_is_flat_and_durations_differ():
    pair = synth_pair(0, _spec())
    assert len(pair.speech) < len(pair.singing)
    f0 = dsp.estimate_f0(pair.speech)
    v = f0[f0 > 0]
    assert v.size > 0 and np.all(np.abs(v / 140.0 - 1) < 0.1)
