"""MFCC front end and context stacking."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.fft import dct, rfft

LOG_FLOOR = 1e-10
PRE_EMPHASIS = 0.97


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FrameSpec:
    sample_rate: int = 16000
    window_length: float = 0.025
    hop: float = 0.010
    mel_filters: int = 40
    cepstral_coeffs: int = 13
    context_left: int = 9
    context_right: int = 9

    def __post_init__(self):
        if self.window_length < self.hop:
            raise FeatureError("window_length must be >= hop")
        if self.cepstral_coeffs > self.mel_filters:
            raise FeatureError("cepstral_coeffs must be <= mel_filters")
        if self.context_left < 0 or self.context_right < 0:
            raise FeatureError("context sizes must be >= 0")

    @property
    def window_samples(self):
        return int(round(self.window_length * self.sample_rate))

    @property
    def hop_samples(self):
        return int(round(self.hop * self.sample_rate))

    @property
    def n_fft(self):
        return 1 << (self.window_samples - 1).bit_length()

    @property
    def context_width(self):
        return self.context_left + 1 + self.context_right

    @property
    def stacked_dim(self):
        return self.cepstral_coeffs * self.context_width

    def n_frames(self, n_samples):
        return (n_samples - self.window_samples) // self.hop_samples + 1

    def to_dict(self):
        return asdict(self)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(spec):
    """Triangular filters of shape (mel_filters, n_fft // 2 + 1).

    Triangles are evaluated at the exact bin frequencies rather than rounded
    to bin indices, so narrow low-frequency filters never collapse.
    """
    n_bins = spec.n_fft // 2 + 1
    freqs = np.arange(n_bins) * spec.sample_rate / spec.n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(spec.sample_rate / 2), spec.mel_filters + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centers(spec):
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(spec.sample_rate / 2), spec.mel_filters + 2))
    return edges[1:-1]


def frame_signal(waveform, spec):
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise FeatureError("waveform must be mono (1-D)")
    win, hop = spec.window_samples, spec.hop_samples
    if x.shape[0] < win:
        raise FeatureError(f"waveform of {x.shape[0]} samples is shorter than one window ({win})")
    n = spec.n_frames(x.shape[0])
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def log_mel_energies(waveform, spec):
    x = np.asarray(waveform, dtype=np.float64)
    emphasized = np.concatenate([x[:1], x[1:] - PRE_EMPHASIS * x[:-1]])
    frames = frame_signal(emphasized, spec) * np.hanning(spec.window_samples + 2)[1:-1]
    mag = np.abs(rfft(frames, n=spec.n_fft, axis=1))
    energies = mag @ mel_filterbank(spec).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def mfcc(waveform, spec=None):
    """MFCC frames of shape (n_frames, cepstral_coeffs), C0 included."""
    spec = spec or FrameSpec()
    logmel = log_mel_energies(waveform, spec)
    return dct(logmel, type=2, norm="ortho", axis=1)[:, :spec.cepstral_coeffs]


def stack_context(frames, spec=None):
    """Concatenate each frame with its left/right neighbours (edge-replicated)."""
    spec = spec or FrameSpec()
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise FeatureError("need a non-empty (n_frames, dim) array")
    T = frames.shape[0]
    offsets = np.arange(-spec.context_left, spec.context_right + 1)
    idx = np.clip(np.arange(T)[:, None] + offsets[None, :], 0, T - 1)
    return frames[idx].reshape(T, -1)


def utterance_features(waveform, spec=None):
    spec = spec or FrameSpec()
    return stack_context(mfcc(waveform, spec), spec)
