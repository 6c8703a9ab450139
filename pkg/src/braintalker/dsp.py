"""Signal conditioning: integer-ratio resampling, channel z-scoring and log-mel extraction."""

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.signal import resample_poly

SPEECH_RATE = 16000
WIN_LENGTH = 400  # 25 ms @ 16 kHz
HOP_LENGTH = 160  # 10 ms @ 16 kHz
N_FFT = 512
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
LOG_FLOOR = 1e-5
SUPPORTED_BINS = (13, 80)


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-amplitude mel-spectrogram, ``frames x bins``."""

    values: np.ndarray
    hop_ms: float = 10.0
    win_ms: float = 25.0
    sample_rate: int = SPEECH_RATE

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


def resample(signal, from_rate: int, to_rate: int) -> np.ndarray:
    """Band-limited integer-factor resampling (Kaiser-windowed sinc, polyphase).

    Output length is ``round(len(signal) * to_rate / from_rate)``.
    """
    if from_rate <= 0 or to_rate <= 0:
        raise ValueError(f"sample rates must be positive, got {from_rate} -> {to_rate}")
    x = np.asarray(signal, dtype=np.float64)
    if from_rate == to_rate:
        return x.copy()
    if to_rate % from_rate and from_rate % to_rate:
        raise ValueError(
            f"only integer resampling ratios are supported, got {from_rate} -> {to_rate}"
        )
    ratio = Fraction(to_rate, from_rate)
    y = resample_poly(x, ratio.numerator, ratio.denominator, axis=-1)
    n_out = int(round(x.shape[-1] * to_rate / from_rate))
    if y.shape[-1] >= n_out:
        return y[..., :n_out]
    pad = [(0, 0)] * (y.ndim - 1) + [(0, n_out - y.shape[-1])]
    return np.pad(y, pad)


def normalize_channel(signal) -> np.ndarray:
    """Zero-mean, unit (population) variance; a constant signal maps to zeros."""
    x = np.asarray(signal, dtype=np.float64)
    centered = x - x.mean()
    std = centered.std()
    if std < 1e-12:
        return np.zeros_like(x)
    return centered / std


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(bins: int, n_fft: int = N_FFT, sample_rate: int = SPEECH_RATE,
                   fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> np.ndarray:
    """HTK-scale triangular filters, unit peak, shape ``(bins, n_fft // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), bins + 2))
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def num_frames(n_samples: int) -> int:
    """Frame count of an uncentered 25 ms / 10 ms analysis."""
    if n_samples < WIN_LENGTH:
        return 0
    return 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def mel_spectrogram(wave, bins: int = 13) -> MelSpectrogram:
    x = np.asarray(getattr(wave, "samples", wave), dtype=np.float64)
    rate = getattr(wave, "sample_rate", SPEECH_RATE)
    if rate != SPEECH_RATE:
        raise ValueError(f"expected {SPEECH_RATE} Hz input, got {rate} Hz")
    if bins not in SUPPORTED_BINS:
        raise ValueError(f"bins must be one of {SUPPORTED_BINS}, got {bins}")
    if x.shape[-1] < WIN_LENGTH:
        raise ValueError(f"input shorter than one window ({x.shape[-1]} < {WIN_LENGTH} samples)")

    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH]
    window = np.hanning(WIN_LENGTH + 1)[:-1]  # periodic Hann
    magnitude = np.abs(np.fft.rfft(frames * window, n=N_FFT, axis=-1))
    mel = magnitude @ mel_filterbank(bins).T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32))
