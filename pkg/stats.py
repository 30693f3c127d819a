"""Dataset statistics for segment sets, utterance tables and mixture lists."""

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from manifest import atomic_open
from pairer import speaker_of

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorpusStats:
    n_speakers: int
    n_utterances: int
    total_s: float
    utts_per_speaker: float
    length_mean_s: float
    length_std_s: float
    minutes_per_speaker: float

    @property
    def total_hours(self):
        return self.total_s / 3600.0


@dataclass(frozen=True)
class UsageStats:
    n_mixtures: int
    utterance_usage: dict = field(repr=False)
    speaker_usage: dict = field(repr=False)
    pair_counts: dict = field(repr=False)
    histogram: dict
    speaker_histograms: dict = field(default_factory=dict, repr=False)

    @property
    def usage_min(self):
        return min(self.utterance_usage.values(), default=0)

    @property
    def usage_max(self):
        return max(self.utterance_usage.values(), default=0)

    @property
    def usage_mean(self):
        if not self.utterance_usage:
            return 0.0
        return sum(self.utterance_usage.values()) / len(self.utterance_usage)

    @property
    def max_pair_repeats(self):
        return max(self.pair_counts.values(), default=0)


def _duration(item):
    return item.duration_s if hasattr(item, "duration_s") else item.length_s


def corpus_stats(segments):
    """Totals over anything with a speaker and a duration (segments or utterance records)."""
    if not segments:
        return CorpusStats(0, 0, 0.0, 0.0, 0.0, 0.0, 0.0)

    lengths = np.array([_duration(s) for s in segments], dtype=np.float64)
    speakers = {s.speaker for s in segments}
    total = float(lengths.sum())
    return CorpusStats(
        n_speakers=len(speakers),
        n_utterances=len(segments),
        total_s=total,
        utts_per_speaker=len(segments) / len(speakers),
        length_mean_s=float(lengths.mean()),
        length_std_s=float(lengths.std()),
        minutes_per_speaker=total / 60.0 / len(speakers),
    )


def usage_stats(mixes, universe=None):
    """Usage counts per utterance and speaker, pair repetitions and usage histograms.

    Utterances in `universe` that never occur are counted with usage 0 and
    attributed to the speaker named by their id.
    """
    usage = Counter({ref: 0 for ref in universe or ()})
    owner = {ref: speaker_of(ref) for ref in universe or ()}
    speakers = Counter()
    pairs = Counter()
    for mix in mixes:
        usage[mix.utt1] += 1
        usage[mix.utt2] += 1
        owner[mix.utt1] = mix.speaker1
        owner[mix.utt2] = mix.speaker2
        speakers[mix.speaker1] += 1
        speakers[mix.speaker2] += 1
        pairs[tuple(sorted((mix.speaker1, mix.speaker2)))] += 1
    for ref in universe or ():
        speakers.setdefault(owner[ref], 0)

    histogram = Counter(usage.values())
    per_speaker = {}
    for ref, count in usage.items():
        per_speaker.setdefault(owner[ref], Counter())[count] += 1
    return UsageStats(
        n_mixtures=len(mixes),
        utterance_usage=dict(sorted(usage.items())),
        speaker_usage=dict(sorted(speakers.items())),
        pair_counts=dict(sorted(pairs.items())),
        histogram=dict(sorted(histogram.items())),
        speaker_histograms={s: dict(sorted(h.items())) for s, h in sorted(per_speaker.items())},
    )


COLUMNS = ["dataset", "speakers", "utterances", "hours", "utts_per_spk", "len_mean_s",
           "len_std_s", "min_per_spk", "mixtures", "usage_min", "usage_max", "usage_mean",
           "max_pair_repeats"]


def _row(name, corpus, usage):
    row = [name]
    if corpus is None:
        row += ["-"] * 7
    else:
        row += [str(corpus.n_speakers), str(corpus.n_utterances), f"{corpus.total_hours:.1f}",
                f"{corpus.utts_per_speaker:.2f}", f"{corpus.length_mean_s:.2f}",
                f"{corpus.length_std_s:.2f}", f"{corpus.minutes_per_speaker:.2f}"]
    if usage is None:
        row += ["-"] * 5
    else:
        row += [str(usage.n_mixtures), str(usage.usage_min), str(usage.usage_max),
                f"{usage.usage_mean:.2f}", str(usage.max_pair_repeats)]
    return row


def format_table(entries):
    """Aligned plain-text table, one row per (name, CorpusStats or None, UsageStats or None)."""
    rows = [COLUMNS] + [_row(*entry) for entry in entries]
    widths = [max(len(r[k]) for r in rows) for k in range(len(COLUMNS))]
    lines = []
    for k, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) if c == 0 else cell.rjust(w)
                               for c, (cell, w) in enumerate(zip(row, widths))).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_tsv(path, entries):
    with atomic_open(path) as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(COLUMNS)
        for entry in entries:
            writer.writerow(_row(*entry))
    logger.info(f"Wrote statistics for {len(entries)} datasets to {path}")


def write_histogram(path, usage):
    """TSV: usage count, number of utterances used that often."""
    with atomic_open(path) as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["usage", "utterances"])
        for count, n in usage.histogram.items():
            writer.writerow([count, n])


def write_speaker_histogram(path, usage):
    """TSV, one row per speaker: mixture slots, then how many of its utterances have each usage."""
    with atomic_open(path) as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["speaker", "slots", "usage_min", "usage_max", "histogram"])
        for speaker, hist in usage.speaker_histograms.items():
            writer.writerow([speaker, usage.speaker_usage.get(speaker, 0), min(hist), max(hist),
                             ",".join(f"{count}:{n}" for count, n in hist.items())])
    logger.info(f"Wrote usage histograms for {len(usage.speaker_histograms)} speakers to {path}")
