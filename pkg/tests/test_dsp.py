import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tagkit import dsp

SR = dsp.SAMPLE_RATE


def tone(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return dsp.Waveform(amp * np.sin(2 * np.pi * freq * t))


def test_zero_waveform_gives_zero_power():
    p = dsp.stft_power(dsp.Waveform(np.zeros(SR)))
    assert p.shape == (49, 513)
    assert not p.any()


def test_frame_count_formula():
    assert dsp.num_frames(160000, 640, 320) == 499
    assert dsp.log_mel(dsp.Waveform(np.zeros(160000))).num_frames == 499


@pytest.mark.parametrize("k", [5, 20, 47])
def test_sine_at_mel_centre_peaks_at_expected_bin(k):
    freq = dsp.mel_center_frequencies(SR, dsp.N_MELS)[k]
    p = dsp.stft_power(tone(freq))
    peaks = p.argmax(axis=1)
    expected = round(freq * 1024 / SR)
    assert np.all(np.abs(peaks - expected) <= 1)
    mel = dsp.log_mel(tone(freq)).frames
    assert np.all(np.abs(mel[5:-5].argmax(axis=1) - k) <= 1)


def test_parseval():
    rng = np.random.default_rng(0)
    w = dsp.Waveform(rng.normal(size=5000) * 0.1)
    p = dsp.stft_power(w)
    win = 640
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    for t in range(p.shape[0]):
        frame = w.samples[t * 320:t * 320 + win] * hann
        energy = float((frame ** 2).sum())
        assert abs(p[t].sum() - energy) <= 1e-6 * energy


def test_stft_errors():
    with pytest.raises(dsp.AudioError, match="empty input"):
        dsp.stft_power(dsp.Waveform(np.zeros(0)))
    with pytest.raises(dsp.AudioError, match="invalid audio"):
        dsp.stft_power(dsp.Waveform(np.array([0.0, np.nan] * 400)))
    with pytest.raises(dsp.AudioError):
        dsp.Waveform(np.zeros((2, 100)))


def test_filterbank_shape_and_shape_of_rows():
    fb = dsp.mel_filterbank(SR, 1024, 64)
    assert fb.shape == (64, 513)
    assert (fb >= 0).all()
    for row in fb:
        nz = np.flatnonzero(row)
        assert nz.size >= 1
        seg = row[nz[0]:nz[-1] + 1]
        peak = seg.argmax()
        # unimodal: non-decreasing then non-increasing over its support
        assert np.all(np.diff(seg[:peak + 1]) >= 0) and np.all(np.diff(seg[peak:]) <= 0)


def test_filterbank_covers_between_centres():
    fb = dsp.mel_filterbank(SR, 1024, 64)
    centres = dsp.mel_center_frequencies(SR, 64)
    assert np.all(np.diff(centres) > 0)
    bins = np.arange(513) * SR / 1024
    inside = (bins >= centres[0]) & (bins <= centres[-1])
    assert np.all(fb.sum(axis=0)[inside] > 0)


def test_filterbank_underresolved():
    with pytest.raises(dsp.AudioError, match="filterbank underresolved"):
        dsp.mel_filterbank(SR, 64, 64)


def test_silence_is_log_floor():
    m = dsp.log_mel(dsp.Waveform(np.zeros(SR)))
    np.testing.assert_array_equal(m.frames, np.log(dsp.LOG_FLOOR))
    assert m.frames.shape == (49, 64)


def test_doubling_amplitude_shifts_by_log4():
    rng = np.random.default_rng(1)
    x = rng.normal(size=SR) * 0.1
    a = dsp.log_mel(dsp.Waveform(x)).frames
    b = dsp.log_mel(dsp.Waveform(2 * x)).frames
    np.testing.assert_allclose(b - a, np.log(4), atol=1e-6)


def test_hop_shift_moves_frames_by_one():
    rng = np.random.default_rng(2)
    x = rng.normal(size=SR) * 0.1
    a = dsp.log_mel(dsp.Waveform(x)).frames
    b = dsp.log_mel(dsp.Waveform(x[320:])).frames
    np.testing.assert_allclose(a[1:1 + len(b)], b, atol=1e-6)


def test_rejects_other_rates():
    with pytest.raises(dsp.AudioError, match="16000"):
        dsp.log_mel(dsp.Waveform(np.zeros(8000), 8000))


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=640, max_value=4000), st.floats(min_value=1e-6, max_value=1.0))
def test_log_mel_finite_and_length_depends_only_on_size(n, amp):
    x = np.random.default_rng(n).uniform(-amp, amp, size=n)
    m = dsp.log_mel(dsp.Waveform(x))
    assert np.isfinite(m.frames).all()
    assert m.num_frames == (n - 640) // 320 + 1


def test_wav_round_trip(tmp_path):
    x = np.round(np.random.default_rng(3).uniform(-0.9, 0.9, size=1000) * 32768) / 32768
    path = tmp_path / "a.wav"
    dsp.write_wav(path, dsp.Waveform(x))
    back = dsp.read_wav(path)
    assert back.sample_rate_hz == SR
    np.testing.assert_array_equal(back.samples, x)


def test_wav_rejects_stereo_and_rate(tmp_path):
    import wave
    p = tmp_path / "s.wav"
    with wave.open(str(p), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(SR)
        wf.writeframes(b"\0" * 400)
    with pytest.raises(dsp.AudioError, match="mono"):
        dsp.read_wav(p)
    with wave.open(str(p), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(44100)
        wf.writeframes(b"\0" * 400)
    with pytest.raises(dsp.AudioError, match="16000"):
        dsp.read_wav(p)
    p.write_bytes(b"not a wav")
    with pytest.raises(dsp.AudioError):
        dsp.read_wav(p)
