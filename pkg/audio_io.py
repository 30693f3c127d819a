"""Reading, writing and resampling mono PCM audio."""

import logging
import os
from dataclasses import dataclass
from math import gcd

import numpy as np
import soundfile as sf
from scipy import signal

from errors import (AudioFormatError, ConfigError, InputNotFoundError,
                    UnsupportedFormatError)
from manifest import atomic_path

logger = logging.getLogger(__name__)

WORKING_RATE_HZ = 8000
SUPPORTED_SUBTYPES = ("PCM_16", "FLOAT")

# Resampler filter design
KAISER_BETA = 8.6
TAPS_PER_PHASE = 64


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate_hz) <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise AudioFormatError("waveform contains NaN or Inf samples")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self):
        return len(self) / self.sample_rate_hz

    def segment(self, start_s, end_s):
        """Samples between two times, clipped to the signal bounds."""
        start = max(0, int(round(start_s * self.sample_rate_hz)))
        end = min(len(self), int(round(end_s * self.sample_rate_hz)))
        return Waveform(self.samples[start:max(start, end)], self.sample_rate_hz)


def read_wav(path, channel=None):
    """Read a 16-bit PCM or 32-bit float WAV file as a mono Waveform."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise InputNotFoundError(path, "audio file")

    try:
        info = sf.info(path)
    except RuntimeError as e:
        raise AudioFormatError(f"cannot read {path}: {e}")

    if info.format != "WAV":
        raise UnsupportedFormatError(f"{path}: container {info.format} is not RIFF/WAVE")
    if info.subtype not in SUPPORTED_SUBTYPES:
        raise UnsupportedFormatError(f"{path}: encoding {info.subtype} is not supported")

    try:
        data, rate = sf.read(path, dtype="float64", always_2d=True)
    except RuntimeError as e:
        raise AudioFormatError(f"cannot decode {path}: {e}")

    n_channels = data.shape[1]
    if channel is None:
        if n_channels != 1:
            raise ConfigError(f"{path} has {n_channels} channels; a channel index is required")
        channel = 0
    if not 0 <= channel < n_channels:
        raise ConfigError(f"{path}: channel {channel} out of range (0..{n_channels - 1})")

    logger.debug(f"Read {path} channel {channel}: {data.shape[0]} samples at {rate} Hz")
    return Waveform(data[:, channel], rate)


def write_wav(path, w, float_output=False):
    """Write a Waveform as mono 16-bit PCM (default) or 32-bit float WAV."""
    path = os.fspath(path)
    samples = w.samples
    peak = float(np.max(np.abs(samples))) if len(w) else 0.0

    if float_output:
        data, subtype = samples.astype(np.float32), "FLOAT"
    else:
        if peak > 1.0:
            logger.warning(f"Clipping {path}: peak {peak:.3f} exceeds full scale")
        # Quantize here so reads (which scale by 1/32768) are off by at most half a step
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
        subtype = "PCM_16"

    with atomic_path(path) as tmp:
        sf.write(tmp, data, w.sample_rate_hz, subtype=subtype, format="WAV")
    return path


def _resampling_filter(up, down):
    """Kaiser-windowed sinc lowpass with cutoff at the lower Nyquist frequency.

    Each of the `up` polyphase branches is scaled to sum to 1/up, so after
    resample_poly's gain of `up` every output phase passes DC exactly.
    """
    max_rate = max(up, down)
    numtaps = TAPS_PER_PHASE * max_rate + 1
    h = signal.firwin(numtaps, 1.0 / max_rate, window=("kaiser", KAISER_BETA))
    for phase in range(up):
        h[phase::up] /= up * h[phase::up].sum()
    return h


def resample_to(w, target_hz):
    """Band-limited polyphase resampling to `target_hz`."""
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise ConfigError(f"target rate must be positive, got {target_hz}")
    if target_hz == w.sample_rate_hz:
        return w

    g = gcd(target_hz, w.sample_rate_hz)
    up, down = target_hz // g, w.sample_rate_hz // g
    out_len = int(round(len(w) * target_hz / w.sample_rate_hz))
    if len(w) == 0:
        return Waveform(np.zeros(0), target_hz)

    y = signal.resample_poly(w.samples, up, down, window=_resampling_filter(up, down))
    if y.shape[0] >= out_len:
        y = y[:out_len]
    else:
        y = np.concatenate([y, np.zeros(out_len - y.shape[0])])

    logger.debug(f"Resampled {w.sample_rate_hz} Hz -> {target_hz} Hz ({len(w)} -> {out_len} samples)")
    return Waveform(y, target_hz)
