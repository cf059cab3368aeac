"""80-dimensional log-Mel filterbank frontend.

25 ms Hann windows every 10 ms, 512-point DFT magnitude squared, 80
triangular mel filters spanning 125-7600 Hz, natural log with a 1e-10 floor.
Per-utterance mean/variance normalization is a separate, optional step so the
raw features keep their documented invariants (floor value, energy shifts).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import SAMPLE_RATE, Utterance
from .errors import LengthError

N_MELS = 80
WIN_SAMPLES = 400   # 25 ms at 16 kHz
HOP_SAMPLES = 160   # 10 ms
N_FFT = 512
FMIN = 125.0
FMAX = 7600.0
LOG_FLOOR = 1e-10


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T', n_mels) float32
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    def __len__(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular filter matrix of shape (n_fft//2 + 1, n_mels)."""
    points_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_fft // 2 + 1, n_mels), dtype=np.float64)
    for i in range(n_mels):
        left, center, right = points_hz[i], points_hz[i + 1], points_hz[i + 2]
        up = (bin_hz - left) / (center - left)
        down = (right - bin_hz) / (right - center)
        fb[:, i] = np.maximum(0.0, np.minimum(up, down))
    return fb.astype(np.float32)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN,
                           fmax: float = FMAX) -> np.ndarray:
    points_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return points_hz[1:-1]


def num_frames(n_samples: int) -> int:
    return 1 + (n_samples - WIN_SAMPLES) // HOP_SAMPLES


def logmel(utt: Utterance) -> FeatureSequence:
    x = np.asarray(utt.samples, dtype=np.float32)
    if x.size < WIN_SAMPLES:
        raise LengthError(f"need >= {WIN_SAMPLES} samples for one window, got {x.size}")
    t = num_frames(x.size)
    windows = np.lib.stride_tricks.sliding_window_view(x, WIN_SAMPLES)[::HOP_SAMPLES][:t]
    hann = np.hanning(WIN_SAMPLES).astype(np.float32)
    spec = np.fft.rfft(windows * hann, n=N_FFT, axis=1)
    power = (spec.real ** 2 + spec.imag ** 2).astype(np.float32)
    mel = power @ mel_filterbank()
    frames = np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)
    return FeatureSequence(frames=frames)


def normalize_features(frames: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-utterance mean/variance normalization over time, per mel bin."""
    mu = frames.mean(axis=0, keepdims=True)
    sd = frames.std(axis=0, keepdims=True)
    return ((frames - mu) / (sd + eps)).astype(np.float32)
