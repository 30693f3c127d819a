"""Short-time Fourier analysis and overlap-add synthesis.

Square-root Hann windows on both sides, so the analysis-synthesis product is a
Hann window, which overlap-adds to a constant at any hop dividing window/2.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from audio_io import Waveform
from errors import ConfigError, GeometryError, SignalTooShortError

logger = logging.getLogger(__name__)

WINDOW_LEN = 512
HOP = 128

# Samples whose summed squared window falls below this fraction of the
# full-overlap value are tapered instead of divided.
WSS_FLOOR = 1e-2


@dataclass(frozen=True)
class Spectrogram:
    frames: np.ndarray
    window_len: int
    hop: int
    sample_rate_hz: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.complex128)
        if frames.ndim != 2:
            raise GeometryError(f"spectrogram must be 2-D (frames x bins), got shape {frames.shape}")
        if frames.shape[1] != self.window_len // 2 + 1:
            raise GeometryError(
                f"{frames.shape[1]} bins inconsistent with window {self.window_len}")
        if self.hop <= 0 or self.hop > self.window_len:
            raise GeometryError(f"hop {self.hop} invalid for window {self.window_len}")
        if not np.all(np.isfinite(frames)):
            raise GeometryError("spectrogram contains non-finite entries")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_bins(self):
        return self.frames.shape[1]

    def scaled(self, factor):
        """Spectrogram multiplied elementwise by a scalar or a T x F array."""
        return Spectrogram(self.frames * factor, self.window_len, self.hop, self.sample_rate_hz)


def sqrt_hann(window_len):
    """Periodic square-root Hann window."""
    return np.sqrt(get_window("hann", window_len, fftbins=True))


def _check_geometry(window_len, hop):
    if window_len <= 0 or window_len & (window_len - 1):
        raise ConfigError(f"window length must be a power of two, got {window_len}")
    if hop <= 0 or window_len % hop:
        raise ConfigError(f"hop {hop} must divide window length {window_len}")


def stft(w, window_len=WINDOW_LEN, hop=HOP):
    """Frames fully inside the signal, T = floor((len - window_len) / hop) + 1."""
    _check_geometry(window_len, hop)
    if len(w) < window_len:
        raise SignalTooShortError(
            f"signal of {len(w)} samples is shorter than one {window_len}-sample window")

    frames = np.lib.stride_tricks.sliding_window_view(w.samples, window_len)[::hop]
    spec = np.fft.rfft(frames * sqrt_hann(window_len), axis=1)
    return Spectrogram(spec, window_len, hop, w.sample_rate_hz)


def istft(s, out_len=None):
    """Weighted overlap-add synthesis; mixture phase is whatever `s` carries."""
    _check_geometry(s.window_len, s.hop)
    natural_len = (s.n_frames - 1) * s.hop + s.window_len
    if out_len is None:
        out_len = natural_len
    if out_len <= 0 or abs(out_len - natural_len) > s.window_len:
        raise GeometryError(
            f"output length {out_len} not within one window of {natural_len}")

    window = sqrt_hann(s.window_len)
    frames = np.fft.irfft(s.frames, n=s.window_len, axis=1) * window

    length = max(out_len, natural_len)
    y = np.zeros(length)
    wss = np.zeros(length)
    for t in range(s.n_frames):
        start = t * s.hop
        y[start:start + s.window_len] += frames[t]
        wss[start:start + s.window_len] += window ** 2

    full_overlap = s.window_len / (2.0 * s.hop)
    y /= np.maximum(wss, WSS_FLOOR * full_overlap)
    return Waveform(y[:out_len], s.sample_rate_hz)


def magnitude(s):
    return np.abs(s.frames)
