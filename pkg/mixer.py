"""Render two-speaker mixtures from a mixture list."""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from audio_io import Waveform, read_wav, write_wav
from errors import ConfigError, DegenerateInputError, MissingAudioError
from manifest import atomic_open
from segmenter import read_frame_labels

logger = logging.getLogger(__name__)

MODES = ("min", "max")
PEAK_LIMIT = 0.9


@dataclass(frozen=True)
class RenderedMixture:
    mixture: Waveform
    sources: list = field(repr=False)
    applied_gains: tuple
    output_scale: float
    mode: str
    input_lengths: tuple

    def __post_init__(self):
        lengths = {len(self.mixture)} | {len(s) for s in self.sources}
        if len(lengths) != 1:
            raise ConfigError(f"mixture and sources differ in length: {sorted(lengths)}")


class PathResolver:
    """Maps an utterance reference (a WAV path, optionally without extension) to audio."""

    def __init__(self, root=None):
        self.root = root

    def path_of(self, ref):
        path = ref if self.root is None or os.path.isabs(ref) else os.path.join(self.root, ref)
        if not path.endswith(".wav") and not os.path.exists(path):
            path += ".wav"
        return path

    def __call__(self, ref):
        path = self.path_of(ref)
        if not os.path.exists(path):
            raise MissingAudioError(f"no audio for {ref} (looked for {path})")
        return read_wav(path)


class LabelActivity:
    """Per-sample speech masks from `<utterance>.lab` files (one 0/1 per frame step).

    Utterances without a label file get None, i.e. whole-segment power.
    """

    def __init__(self, resolver, step_s=0.01):
        self.resolver = resolver
        self.step_s = step_s

    def __call__(self, ref):
        wav_path = self.resolver.path_of(ref)
        lab_path = os.path.splitext(wav_path)[0] + ".lab"
        if not os.path.exists(lab_path):
            return None
        frames = read_frame_labels(lab_path, self.step_s).speech
        audio = self.resolver(ref)
        n = len(audio)
        step = int(round(self.step_s * audio.sample_rate_hz))
        active = np.repeat(frames, step)[:n]
        return np.concatenate([active, np.zeros(n - active.shape[0], dtype=bool)])


def mix_name(spec):
    """`<utt1>_<snr1>_<utt2>_<snr2>` from the reference stems."""
    stem1 = os.path.splitext(os.path.basename(spec.utt1))[0]
    stem2 = os.path.splitext(os.path.basename(spec.utt2))[0]
    return f"{stem1}_{spec.snr1_db:.4g}_{stem2}_{spec.snr2_db:.4g}"


def speech_power(samples, active=None):
    """Mean square over active samples, or over all samples without labels."""
    if active is not None:
        samples = samples[active]
    if samples.shape[0] == 0:
        return 0.0
    return float(np.mean(samples ** 2))


def _fit(samples, active, n):
    """Cut the tail or zero-pad it to `n` samples; padding is never active."""
    if samples.shape[0] >= n:
        return samples[:n], active[:n]
    pad = n - samples.shape[0]
    return (np.concatenate([samples, np.zeros(pad)]),
            np.concatenate([active, np.zeros(pad, dtype=bool)]))


def _resolve(audio, ref):
    try:
        return audio(ref)
    except MissingAudioError:
        raise
    except (KeyError, FileNotFoundError) as e:
        raise MissingAudioError(f"no audio for {ref}: {e}")


def render(spec, audio, mode="min", activity=None):
    """Scale both utterances to their SNRs and sum them.

    `audio` maps a reference to a Waveform. `activity` optionally maps a
    reference to a per-sample boolean speech mask (or None); speech power is
    then measured over active samples only. Gains are computed after the
    length reconciliation, so the power ratio of the emitted sources is
    exactly the requested SNR difference.
    """
    if mode not in MODES:
        raise ConfigError(f"mix mode must be one of {MODES}, got {mode!r}")

    waves = [_resolve(audio, spec.utt1), _resolve(audio, spec.utt2)]
    if waves[0].sample_rate_hz != waves[1].sample_rate_hz:
        raise ConfigError(
            f"sample rates differ: {spec.utt1} at {waves[0].sample_rate_hz} Hz, "
            f"{spec.utt2} at {waves[1].sample_rate_hz} Hz")

    masks = []
    for ref, w in zip((spec.utt1, spec.utt2), waves):
        active = activity(ref) if activity is not None else None
        if active is None:
            active = np.ones(len(w), dtype=bool)
        active = np.asarray(active, dtype=bool)
        if active.shape[0] != len(w):
            raise ConfigError(f"activity mask for {ref} has {active.shape[0]} samples, audio has {len(w)}")
        masks.append(active)

    lengths = (len(waves[0]), len(waves[1]))
    n = min(lengths) if mode == "min" else max(lengths)

    scaled = []
    gains = []
    for ref, w, active, snr_db in zip((spec.utt1, spec.utt2), waves, masks, (spec.snr1_db, spec.snr2_db)):
        x, a = _fit(w.samples, active, n)
        power = speech_power(x, a)
        if power <= 0:
            raise DegenerateInputError(f"{ref} has no speech energy after {mode} reconciliation")
        gain = 10 ** (snr_db / 20.0) / np.sqrt(power)
        gains.append(float(gain))
        scaled.append(gain * x)

    peak = float(np.max(np.abs(scaled[0] + scaled[1]))) if n else 0.0
    output_scale = min(1.0, PEAK_LIMIT / peak) if peak > 0 else 1.0
    sources = [s * output_scale for s in scaled]
    mixture = sources[0] + sources[1]

    rate = waves[0].sample_rate_hz
    return RenderedMixture(
        mixture=Waveform(mixture, rate),
        sources=[Waveform(s, rate) for s in sources],
        applied_gains=tuple(gains),
        output_scale=output_scale,
        mode=mode,
        input_lengths=lengths,
    )


def write_rendered(outdir, name, rendered, float_output=False):
    """Write `<outdir>/{mix,s1,s2}/<name>.wav`."""
    write_wav(os.path.join(outdir, "mix", f"{name}.wav"), rendered.mixture, float_output)
    for k, source in enumerate(rendered.sources, 1):
        write_wav(os.path.join(outdir, f"s{k}", f"{name}.wav"), source, float_output)


def _render_one(job):
    spec, audio, activity, mode, outdir, float_output = job
    rendered = render(spec, audio, mode, activity)
    name = mix_name(spec)
    write_rendered(outdir, name, rendered, float_output)
    rate = rendered.mixture.sample_rate_hz
    return [name, spec.utt1, spec.utt2, f"{spec.snr1_db:.6f}", f"{spec.snr2_db:.6f}",
            f"{rendered.applied_gains[0]:.8g}", f"{rendered.applied_gains[1]:.8g}",
            f"{rendered.output_scale:.8g}", mode,
            f"{rendered.input_lengths[0] / rate:.4f}", f"{rendered.input_lengths[1] / rate:.4f}",
            f"{len(rendered.mixture) / rate:.4f}"]


METADATA_COLUMNS = ["mixname", "utt1", "utt2", "snr1_db", "snr2_db", "gain1", "gain2",
                    "output_scale", "mode", "length1_s", "length2_s", "out_length_s"]


def render_list(mixes, outdir, audio, mode="min", float_output=False, activity=None, map_fn=map):
    """Render every mixture and write `<outdir>/metadata.tsv`; returns the metadata rows.

    `map_fn` is an ordered map, e.g. a worker pool's `imap`.
    """
    names = [mix_name(m) for m in mixes]
    if len(set(names)) != len(names):
        logger.warning(f"{len(names) - len(set(names))} mixtures share a name and will overwrite each other")

    rows = list(map_fn(_render_one, [(m, audio, activity, mode, outdir, float_output) for m in mixes]))
    with atomic_open(os.path.join(outdir, "metadata.tsv")) as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(METADATA_COLUMNS)
        writer.writerows(rows)

    logger.info(f"Rendered {len(rows)} mixtures ({mode}) to {outdir}")
    return rows
