from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stsconv import dsp
from stsconv.audio_io import AudioClip
from stsconv.dsp import DSPError, SpectralFrameSeq

SR = 24000


def tone(freq, seconds=0.5, harmonics=1, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    y = sum(np.sin(2 * np.pi * freq * h * t) / h for h in range(1, harmonics + 1))
    return AudioClip(amp * y / np.max(np.abs(y)), sr)


# ----------------------------------------------------------------------- stft/mel


def test_frame_count_formula():
    expected = math.floor((24000 - 512) / 128) + 1
    assert expected == 184
    assert len(dsp.stft_mel(AudioClip(np.zeros(24000)))) == expected


def test_silent_clip_gives_zero_and_floor():
    clip = AudioClip(np.zeros(4000))
    assert np.all(dsp.stft_mel(clip).frames == 0.0)
    np.testing.assert_array_equal(dsp.stft_mel(clip, log=True).frames, np.log(1e-5))


@pytest.mark.parametrize("freq", [1500.0, 2000.0, 5000.0])
def test_tone_peaks_in_nearest_mel_bin(freq):
    centers = dsp.mel_center_frequencies()
    expected = int(np.argmin(np.abs(centers - freq)))
    mel = dsp.stft_mel(tone(freq)).frames
    assert np.all(np.argmax(mel, axis=1) == expected)


def test_low_tone_peak_limited_by_fft_resolution():
    # Below ~500 Hz the filters are spaced closer than one FFT bin (46.9 Hz),
    # so the peak may land on the neighbour of the nearest-centre filter.
    centers = dsp.mel_center_frequencies()
    assert np.diff(centers)[:12].max() < 24000 / 512
    expected = int(np.argmin(np.abs(centers - 440.0)))
    mel = dsp.stft_mel(tone(440.0)).frames
    assert np.all(np.abs(np.argmax(mel, axis=1) - expected) <= 1)


def test_clip_shorter_than_window_is_rejected():
    with pytest.raises(DSPError, match="shorter than one window"):
        dsp.stft_mel(AudioClip(np.ones(100)))


def test_centered_stft_frame_count():
    n = 5000
    assert dsp.stft(np.zeros(n), center=True).shape[0] == n // 128 + 1


def test_filterbank_peaks_are_unit():
    fb = dsp.mel_filterbank()
    assert fb.shape == (80, 257)
    assert np.all(fb <= 1.0) and np.all(fb >= 0.0)
    # every filter touches at least one FFT bin, even where filters are narrower than a bin
    assert np.all(fb.max(axis=1) > 0.0)
    assert fb[40:].max(axis=1).min() > 0.5


# ---------------------------------------------------------------------- energy


def test_energy_contour_examples():
    np.testing.assert_array_equal(dsp.energy_contour(np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 3.0]])), [0, 5, 3])


def test_energy_needs_linear_frames():
    with pytest.raises(DSPError):
        dsp.energy_contour(SpectralFrameSeq(np.zeros((2, 2)), "log"))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(0, 10)), st.randoms(use_true_random=False))
def test_energy_is_permutation_equivariant(frames, rnd):
    perm = list(range(6))
    rnd.shuffle(perm)
    np.testing.assert_allclose(dsp.energy_contour(frames[:, perm]), dsp.energy_contour(frames), rtol=1e-12)


# ---------------------------------------------------------------------- rhythm


def test_rhythm_closed_form_example():
    r = dsp.extract_rhythm([1.0, 2.0, 3.0], beta=1.0, epsilon=0.0, smooth_sigma=0.0).r
    z = 1.0 / math.sqrt(2.0 / 3.0)  # population std of [1,2,3]
    expected = [1 / (1 + math.exp(z)), 0.5, 1 / (1 + math.exp(-z))]
    np.testing.assert_allclose(r, expected, atol=1e-12)
    # sigmoid(1.22474) = 0.772897; a 4-digit rendering of 0.7727 is a rounding slip
    np.testing.assert_allclose(r, [0.227103, 0.5, 0.772897], atol=1e-6)


def test_rhythm_constant_input_is_half():
    np.testing.assert_array_equal(dsp.extract_rhythm([5.0] * 4, smooth_sigma=0.0).r, 0.5)
    np.testing.assert_array_equal(dsp.extract_rhythm([5.0] * 4, epsilon=0.0, smooth_sigma=0.0).r, 0.5)


def test_rhythm_defaults():
    c = dsp.extract_rhythm(np.arange(10.0))
    assert c.beta == 400.0 and c.epsilon == 1e-8


def test_rhythm_smoothing_matches_reflect_gaussian():
    from scipy.ndimage import gaussian_filter1d

    e = np.random.default_rng(0).gamma(2.0, size=50)
    raw = dsp.extract_rhythm(e, beta=2.0, smooth_sigma=0.0).r
    np.testing.assert_allclose(dsp.extract_rhythm(e, beta=2.0).r,
                               gaussian_filter1d(raw, 1.0, mode="reflect", truncate=4.0), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)))
def test_rhythm_range_is_open_unit_interval(e):
    r = dsp.extract_rhythm(e).r
    assert np.all(r > 0.0) and np.all(r < 1.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(0, 100)), st.floats(1e-3, 1e3))
def test_rhythm_scale_invariance_with_epsilon(e, c):
    if e.std() < 1e-3:
        return
    a = dsp.extract_rhythm(e, smooth_sigma=0.0).r
    b = dsp.extract_rhythm(c * e, smooth_sigma=0.0).r
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_rhythm_monotone_in_energy_before_smoothing():
    e = np.random.default_rng(1).normal(size=30)
    r = dsp.extract_rhythm(e, beta=0.5, smooth_sigma=0.0).r
    order = np.argsort(e)
    assert np.all(np.diff(r[order]) > 0)


def test_rhythm_rejects_empty_and_nonfinite():
    with pytest.raises(DSPError):
        dsp.extract_rhythm([])
    with pytest.raises(DSPError):
        dsp.extract_rhythm([1.0, np.nan])


# ------------------------------------------------------------------------ f0


def test_f0_of_harmonic_tone():
    f0 = dsp.estimate_f0(tone(220.0, harmonics=6))
    assert f0.shape[0] == dsp.frame_count(12000)
    voiced = f0[f0 > 0]
    assert voiced.size > 0.9 * f0.size
    assert abs(np.median(voiced) - 220.0) <= 2.0


def test_f0_of_white_noise_is_mostly_unvoiced():
    clip = AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, SR), SR)
    f0 = dsp.estimate_f0(clip)
    assert np.mean(f0 == 0) >= 0.9


def test_f0_of_silence_is_unvoiced():
    assert np.all(dsp.estimate_f0(AudioClip(np.zeros(6000))) == 0)


@pytest.mark.parametrize("freq", [110.0, 261.63, 440.0, 659.26])
def test_f0_tracks_several_pitches(freq):
    f0 = dsp.estimate_f0(tone(freq, 0.3, harmonics=4))
    assert abs(np.median(f0[f0 > 0]) - freq) / freq < 0.01


# ------------------------------------------------------------------ quantize


def test_quantize_examples():
    assert dsp.quantize_f0([0.0])[0] == 0
    assert dsp.quantize_f0([80.0])[0] == 1
    assert dsp.quantize_f0([1000.0])[0] == 255
    mid = math.sqrt(80.0 * 1000.0)
    expected = 1 + round(0.5 * 254)
    assert abs(int(dsp.quantize_f0([mid])[0]) - expected) <= 1
    assert dsp.quantize_f0([20.0])[0] == 1 and dsp.quantize_f0([5000.0])[0] == 255


def test_quantize_rejects_bad_range():
    with pytest.raises(DSPError):
        dsp.quantize_f0([100.0], f_min=500.0, f_max=100.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 20, elements=st.floats(0, 2000)))
def test_quantize_monotone_and_idempotent(f0):
    f0 = np.sort(f0)
    bins = dsp.quantize_f0(f0)
    assert np.all(np.diff(bins) >= 0)
    assert np.all((bins == 0) == (f0 <= 0))
    np.testing.assert_array_equal(dsp.quantize_f0(dsp.bin_center_hz(bins)), bins)


def test_pitch_contour_bins():
    pc = dsp.PitchContour(np.array([0.0, 80.0, 1000.0]))
    np.testing.assert_array_equal(pc.bins, [0, 1, 255])
    np.testing.assert_array_equal(pc.voiced, [False, True, True])


# ------------------------------------------------------------------- silence


def _frames_with_energy(levels):
    f = np.zeros((len(levels), 3))
    f[:, 0] = levels
    return f


def test_remove_silence_identity_without_quiet_frames():
    f = _frames_with_energy(np.ones(12))
    out, s = dsp.remove_silence(f, np.arange(12))
    np.testing.assert_array_equal(out, f)
    np.testing.assert_array_equal(s, np.arange(12))


def test_remove_silence_drops_leading_run_from_all_streams():
    levels = np.r_[np.zeros(10), np.ones(20)]
    f = _frames_with_energy(levels)
    out, a, b = dsp.remove_silence(f, np.arange(30), np.arange(30) * 2.0)
    assert out.shape[0] == a.shape[0] == b.shape[0] == 20
    np.testing.assert_array_equal(a, np.arange(10, 30))


def test_interior_short_silence_is_kept():
    levels = np.r_[np.ones(10), np.zeros(3), np.ones(10)]
    keep = dsp.silence_mask(levels, 0.02, min_run=5)
    # run-length oracle: the only low run has length 3 < 5
    runs = np.diff(np.flatnonzero(np.diff(np.r_[1, levels, 1] > 0)))
    assert runs.max() < 5
    assert keep.all()


def test_remove_silence_on_silent_input_fails():
    with pytest.raises(DSPError, match="no voiced content"):
        dsp.remove_silence(np.zeros((10, 3)))


def test_remove_silence_rejects_misaligned_streams():
    with pytest.raises(DSPError):
        dsp.remove_silence(np.ones((5, 2)), np.ones(4))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 40, elements=st.sampled_from([0.0, 0.001, 1.0, 2.0])))
def test_remove_silence_preserves_order_and_alignment(levels):
    if np.percentile(levels, 95) <= 0:
        return
    f = _frames_with_energy(levels)
    try:
        out, idx = dsp.remove_silence(f, np.arange(40))
    except DSPError:
        return
    assert np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(out, f[idx])


# -------------------------------------------------------------------- playback


def test_griffin_lim_preserves_dominant_frequency():
    clip = tone(500.0, 0.4)
    mel = dsp.stft_mel(clip)
    y = dsp.griffin_lim(mel, iters=16)
    spec_in = np.abs(dsp.stft(clip.samples)).mean(0)
    spec_out = np.abs(dsp.stft(y.samples)).mean(0)
    assert abs(int(np.argmax(spec_out)) - int(np.argmax(spec_in))) <= 1
    assert abs(len(y) - (len(mel) - 1) * 128 - 512) == 0


def test_griffin_lim_zero_and_determinism():
    zeros = SpectralFrameSeq(np.zeros((20, 80)))
    assert np.max(np.abs(dsp.griffin_lim(zeros, 4).samples)) < 1e-3
    mel = dsp.stft_mel(tone(300.0, 0.2), log=True)
    a, b = dsp.griffin_lim(mel, 5), dsp.griffin_lim(mel, 5)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_griffin_lim_needs_iterations_and_stats():
    mel = dsp.stft_mel(tone(300.0, 0.1))
    with pytest.raises(DSPError):
        dsp.griffin_lim(mel, 0)
    with pytest.raises(DSPError):
        dsp.griffin_lim(SpectralFrameSeq(np.zeros((3, 80)), "normalized01"), 2)


def test_mel_stats_round_trip():
    logs = [np.array([[-3.0, 0.0]]), np.array([[1.0, -1.0]])]
    stats = dsp.MelStats.from_mels(logs)
    assert (stats.log_min, stats.log_max) == (-3.0, 1.0)
    np.testing.assert_array_equal(stats.normalize(logs[0]), [[0.0, 0.75]])
    np.testing.assert_allclose(stats.denormalize(stats.normalize(logs[1])), logs[1])


def test_cepstral_content_shape_and_determinism():
    log_mel = np.random.default_rng(0).normal(size=(30, 80))
    a = dsp.cepstral_content(log_mel, 32)
    assert a.shape == (30, 32) and a.dtype == np.float32
    np.testing.assert_array_equal(a, dsp.cepstral_content(log_mel, 32))
