import numpy as np
import pytest

from audio_io import Waveform, write_wav

RATE = 8000

# Frequency bands of the synthetic "speakers"
SPEAKER_BANDS = {
    "spka": (200.0, 800.0),
    "spkb": (1000.0, 1600.0),
    "spkc": (1800.0, 2400.0),
    "spkd": (2600.0, 3200.0),
}


def band_noise(low_hz, high_hz, seconds, seed, rate=RATE, rms=0.1):
    """Noise with all of its energy between two frequencies, scaled to an RMS level."""
    n = int(round(seconds * rate))
    spectrum = np.fft.rfft(np.random.default_rng(seed).standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spectrum[(freqs < low_hz) | (freqs > high_hz)] = 0
    x = np.fft.irfft(spectrum, n=n)
    return x * (rms / np.sqrt(np.mean(x ** 2)))


def sine(freq_hz, seconds, rate=RATE, amplitude=0.1 * np.sqrt(2)):
    t = np.arange(int(round(seconds * rate))) / rate
    return amplitude * np.sin(2 * np.pi * freq_hz * t)


def speaker_audio(speaker, seconds, seed, rate=RATE):
    low, high = SPEAKER_BANDS[speaker]
    return Waveform(band_noise(low, high, seconds, seed, rate), rate)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def utterance_dir(tmp_path):
    """Four speakers with three utterances each written as WAVs; returns (dir, table path)."""
    directory = tmp_path / "utts"
    rows = []
    seed = 0
    for speaker in sorted(SPEAKER_BANDS):
        for k, seconds in enumerate((1.5, 2.0, 2.5)):
            seed += 1
            utt_id = f"{speaker}_rec{k}_{0:07d}_{int(seconds * 1000):07d}"
            path = directory / f"{utt_id}.wav"
            write_wav(path, speaker_audio(speaker, seconds, seed))
            rows.append(f"{utt_id}\t{speaker}\t{seconds:.4f}\t{path}\n")
    table = directory / "utterances.tsv"
    table.write_text("".join(rows))
    return directory, table
