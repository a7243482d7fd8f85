"""Log-mel feature extraction and 16-bit PCM WAV I/O."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WIN_S = 0.040
HOP_S = 0.020
N_MELS = 64
LOG_FLOOR = 1e-10


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise AudioError("invalid audio: waveform must be mono (1-D)")
        if self.sample_rate_hz <= 0:
            raise AudioError("invalid audio: sample rate must be positive")
        object.__setattr__(self, "samples", s)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # [T, 64]
    frame_shift_s: float = HOP_S
    frame_length_s: float = WIN_S

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def num_frames(num_samples: int, win: int, hop: int) -> int:
    return (num_samples - win) // hop + 1


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def stft_power(w: Waveform, win_s: float = WIN_S, hop_s: float = HOP_S) -> np.ndarray:
    """One-sided Hann-windowed power spectrogram, shape [T, fft_size/2 + 1].

    Scaled so that each frame's bins sum to the energy of the windowed frame.
    """
    x = w.samples
    if x.size == 0:
        raise AudioError("empty input")
    if not np.all(np.isfinite(x)):
        raise AudioError("invalid audio: non-finite sample")
    if not (win_s >= hop_s > 0):
        raise AudioError("invalid analysis window: need win_s >= hop_s > 0")
    win = int(round(win_s * w.sample_rate_hz))
    hop = int(round(hop_s * w.sample_rate_hz))
    if x.size < win:
        raise AudioError(f"empty input: {x.size} samples shorter than one {win}-sample window")
    n_fft = next_pow2(win)
    T = num_frames(x.size, win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:T]
    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    spec = np.fft.rfft(frames * window, n=n_fft, axis=1)
    power = (spec.real ** 2 + spec.imag ** 2) / n_fft
    power[:, 1:-1] *= 2.0
    return power


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(sample_rate_hz: int, n_mels: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(sample_rate_hz: int = SAMPLE_RATE, fft_size: int = 1024,
                   n_mels: int = N_MELS) -> np.ndarray:
    """Triangular filters equally spaced on the (HTK) mel scale, 0 Hz to Nyquist.

    Returns an [n_mels, fft_size/2 + 1] matrix with unit peak height.
    """
    if n_mels < 1:
        raise AudioError("n_mels must be >= 1")
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise AudioError("fft_size must be a power of two")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2), n_mels + 2))
    bins = np.arange(fft_size // 2 + 1) * sample_rate_hz / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise AudioError(f"filterbank underresolved: filters {empty.tolist()} have no FFT bin")
    return fb


def log_mel(w: Waveform, n_mels: int = N_MELS) -> MelSpectrogram:
    """T x 64 log-mel spectrogram from a 40 ms Hann window with 20 ms shift."""
    if w.sample_rate_hz != SAMPLE_RATE:
        raise AudioError(f"invalid audio: expected {SAMPLE_RATE} Hz, got {w.sample_rate_hz}")
    power = stft_power(w, WIN_S, HOP_S)
    n_fft = 2 * (power.shape[1] - 1)
    fb = mel_filterbank(w.sample_rate_hz, n_fft, n_mels)
    return MelSpectrogram(np.log(power @ fb.T + LOG_FLOOR))


# -- WAV ------------------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read a 16 kHz mono 16-bit PCM RIFF file into [-1, 1) floats."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            nch, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            comp = wf.getcomptype()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: not a PCM RIFF WAV file ({exc})") from None
    if comp != "NONE":
        raise AudioError(f"{path}: compressed WAV ({comp}) is not supported")
    if width != 2:
        raise AudioError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if nch != 1:
        raise AudioError(f"{path}: expected mono, got {nch} channels")
    if rate != SAMPLE_RATE:
        raise AudioError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    """Write as 16-bit PCM, clipping to the representable range."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate_hz)
        wf.writeframes(pcm.tobytes())
