"""Mixture list generation.

Utterances are paired greedily in priority order: the longest of the
least-used utterances is matched with the closest-length utterance that is
(1) from another speaker, (2) as little used as possible, (3) from a speaker it
has not been paired with yet. Constraint (3) is dropped for that utterance once
every usage level has been tried; (1) is never dropped.
"""

import csv
import logging
import os
import re
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from errors import (AnnotationError, ConfigError, InputNotFoundError,
                    MappingError, UnsatisfiableError)
from manifest import atomic_open

logger = logging.getLogger(__name__)

MIN_UTTERANCE_S = 1.3
# Lengths in utterance tables are printed to 0.1 ms; allow that much slack
LENGTH_TOL_S = 1e-3

DEFAULT_TARGETS = {"tr": 20000, "cv": 5000, "tt": 4000}
SNR_RANGE_DB = (0.0, 5.0)


def speaker_of(ref):
    """Speaker id from an utterance reference named `<speaker>_<...>`."""
    stem = os.path.splitext(os.path.basename(ref))[0]
    return stem.split("_", 1)[0]


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker: str
    length_s: float
    usage_count: int = 0
    paired_speakers: set = field(default_factory=set)
    path: Optional[str] = None

    def __post_init__(self):
        if self.usage_count < 0:
            raise ConfigError(f"{self.utt_id}: negative usage count")
        if self.length_s < MIN_UTTERANCE_S - LENGTH_TOL_S:
            raise AnnotationError(
                f"{self.utt_id}: {self.length_s:.3f} s is shorter than {MIN_UTTERANCE_S} s")

    @property
    def ref(self):
        return self.path or self.utt_id


@dataclass(frozen=True)
class MixtureSpec:
    utt1: str
    utt2: str
    snr1_db: float = 0.0
    snr2_db: float = 0.0
    speaker1: Optional[str] = None
    speaker2: Optional[str] = None

    def __post_init__(self):
        if self.speaker1 is None:
            object.__setattr__(self, "speaker1", speaker_of(self.utt1))
        if self.speaker2 is None:
            object.__setattr__(self, "speaker2", speaker_of(self.utt2))
        if self.speaker1 == self.speaker2:
            raise AnnotationError(f"same-speaker mixture: {self.utt1} + {self.utt2}")

    def line(self):
        """MERL list line: `<utt1> <snr1> <utt2> <snr2>`."""
        return f"{self.utt1} {self.snr1_db:.6f} {self.utt2} {self.snr2_db:.6f}"


@dataclass(frozen=True)
class SplitPlan:
    train: frozenset
    cv: frozenset
    test: frozenset

    def __post_init__(self):
        if self.train & self.cv or self.train & self.test or self.cv & self.test:
            raise ConfigError("split speaker sets overlap")

    def subsets(self):
        return {"tr": self.train, "cv": self.cv, "tt": self.test}


@dataclass(frozen=True)
class PairTrace:
    """Bookkeeping for one pairing decision."""
    index: int
    utt1: str
    utt2: str
    min_usage: int
    u1_usage: int
    u2_usage: int
    s1_size: int
    s2_size: int
    s3_size: int
    relaxations: int
    resets: int
    length_diff: float
    eligible: tuple = field(default=(), repr=False)


def generate_mixture_list(utts, target_mixes, seed=None, trace=None):
    """Greedy pairing until `target_mixes` mixtures exist.

    Input records are not modified; their usage counts and paired-speaker sets
    only seed the internal state. Ties go to the lowest utt_id. When `seed` is
    given the finished list is shuffled with it. Pass a list as `trace` to
    collect one PairTrace per mixture.
    """
    if target_mixes < 1:
        raise ConfigError(f"target_mixes must be at least 1, got {target_mixes}")

    records = sorted(utts, key=lambda r: r.utt_id)
    ids = [r.utt_id for r in records]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate utt_id in utterance list")
    speakers = sorted({r.speaker for r in records})
    if len(speakers) < 2:
        raise UnsatisfiableError(
            f"need at least two speakers to pair, got {len(speakers)}")

    spk_index = {s: k for k, s in enumerate(speakers)}
    spk = np.array([spk_index[r.speaker] for r in records])
    lengths = np.array([r.length_s for r in records], dtype=np.float64)
    usage = np.array([r.usage_count for r in records], dtype=np.int64)
    paired = np.zeros((len(records), len(speakers)), dtype=bool)
    for k, r in enumerate(records):
        for other in r.paired_speakers:
            if other in spk_index:
                paired[k, spk_index[other]] = True

    mixes = []
    while len(mixes) < target_mixes:
        min_usage = int(usage.min())
        s1 = usage == min_usage
        u1 = int(np.argmax(np.where(s1, lengths, -np.inf)))

        i = 0
        resets = 0
        relaxations = 0
        while True:
            level = min_usage + i
            if level > usage.max():
                # Every usage level tried: forget who u1 was paired with
                if resets:
                    raise UnsatisfiableError(f"no eligible partner for {ids[u1]}")
                paired[u1, :] = False
                resets += 1
                i = 0
                continue

            s2 = usage == level
            if not s2.any():
                i += 1
                continue
            s3 = (spk != spk[u1]) & ~paired[u1, spk]
            eligible = s2 & s3
            if eligible.any():
                diff = np.where(eligible, np.abs(lengths - lengths[u1]), np.inf)
                u2 = int(np.argmin(diff))
                break
            i += 1
            relaxations += 1

        if trace is not None:
            trace.append(PairTrace(
                index=len(mixes), utt1=ids[u1], utt2=ids[u2],
                min_usage=min_usage, u1_usage=int(usage[u1]), u2_usage=int(usage[u2]),
                s1_size=int(s1.sum()), s2_size=int(s2.sum()), s3_size=int(s3.sum()),
                relaxations=relaxations, resets=resets, length_diff=float(diff[u2]),
                eligible=tuple(ids[k] for k in np.flatnonzero(eligible))))

        usage[u1] += 1
        usage[u2] += 1
        paired[u1, spk[u2]] = True
        paired[u2, spk[u1]] = True
        mixes.append(MixtureSpec(records[u1].ref, records[u2].ref,
                                 speaker1=records[u1].speaker, speaker2=records[u2].speaker))
        logger.debug(f"Paired {ids[u1]} with {ids[u2]} (usage level {level}, resets {resets})")

    if seed is not None:
        order = _rng(seed).permutation(len(mixes))
        mixes = [mixes[k] for k in order]

    logger.info(f"Generated {len(mixes)} mixtures from {len(records)} utterances of "
                f"{len(speakers)} speakers; usage {int(usage.min())}..{int(usage.max())}")
    return mixes


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def assign_snrs(mixes, seed, range_db=SNR_RANGE_DB):
    """Draw x ~ U(low, high) per mixture; source 1 gets +x/2 dB, source 2 gets -x/2 dB."""
    low, high = range_db
    if low > high:
        raise ConfigError(f"SNR range low {low} exceeds high {high}")
    draws = _rng(seed).uniform(low, high, size=len(mixes))
    out = []
    for mix, x in zip(mixes, draws):
        half = float(x) / 2.0
        out.append(replace(mix, snr1_db=half, snr2_db=0.0 - half))
    return out


def split_speakers(speakers, sizes, seed):
    """Disjoint train/cv/test speaker sets; `sizes` is (train, cv, test), train None = remainder."""
    n_train, n_cv, n_test = sizes
    pool = sorted(set(speakers))
    for name, n in (("cv", n_cv), ("test", n_test), ("train", n_train)):
        if n is not None and n < 0:
            raise ConfigError(f"{name} split size must be non-negative, got {n}")
    requested = n_cv + n_test + (n_train or 0)
    if requested > len(pool):
        raise ConfigError(f"split sizes need {requested} speakers, only {len(pool)} available")

    order = [pool[k] for k in _rng(seed).permutation(len(pool))]
    test = order[:n_test]
    cv = order[n_test:n_test + n_cv]
    rest = order[n_test + n_cv:]
    train = rest if n_train is None else rest[:n_train]

    plan = SplitPlan(frozenset(train), frozenset(cv), frozenset(test))
    logger.info(f"Speaker split: train {len(plan.train)}, cv {len(plan.cv)}, test {len(plan.test)}")
    return plan


def restrict_speakers(utts, n_speakers, seed):
    """Utterances of `n_speakers` speakers drawn with the seeded stream."""
    pool = sorted({u.speaker for u in utts})
    if n_speakers > len(pool):
        raise ConfigError(f"cannot keep {n_speakers} speakers out of {len(pool)}")
    chosen = {pool[k] for k in _rng(seed).choice(len(pool), size=n_speakers, replace=False)}
    return [u for u in utts if u.speaker in chosen]


def generate_split_lists(utts, plan, targets=None, seed=None, trace=None):
    """One mixture list per non-empty subset, each from that subset's speakers only."""
    targets = dict(DEFAULT_TARGETS, **(targets or {}))
    lists = {}
    for name, speakers in plan.subsets().items():
        subset = [u for u in utts if u.speaker in speakers]
        if not subset:
            continue
        lists[name] = generate_mixture_list(subset, targets[name], seed=seed, trace=trace)
    return lists


def combine_mixture_lists(lists, target=None, seed=None):
    """Concatenate lists; optionally sub-sample to `target` keeping relative order."""
    combined = [m for mixes in lists for m in mixes]
    if target is None or target == len(combined):
        return combined
    if target > len(combined):
        raise ConfigError(f"cannot sub-sample {target} mixtures from {len(combined)}")
    keep = np.sort(_rng(seed).choice(len(combined), size=target, replace=False))
    return [combined[k] for k in keep]


@dataclass(frozen=True)
class ChannelMap:
    """Ordered regex rewrite rules; the first matching rule wins."""
    rules: tuple

    @classmethod
    def identity(cls):
        return cls((("^", ""),))

    @classmethod
    def from_strings(cls, specs):
        """Rules written as `pattern=replacement`."""
        rules = []
        for spec in specs:
            if "=" not in spec:
                raise ConfigError(f"channel map rule {spec!r} must look like pattern=replacement")
            pattern, replacement = spec.split("=", 1)
            try:
                re.compile(pattern)
            except re.error as e:
                raise ConfigError(f"bad channel map pattern {pattern!r}: {e}")
            rules.append((pattern, replacement))
        if not rules:
            raise ConfigError("channel map has no rules")
        return cls(tuple(rules))

    def apply(self, path):
        for pattern, replacement in self.rules:
            new, n = re.subn(pattern, replacement, path, count=1)
            if n:
                return new
        raise MappingError(f"no channel map rule matches {path}")


def retarget_channel(mixes, channel_map):
    """Same pairs and SNRs, audio paths rewritten to another channel."""
    out = [replace(m, utt1=channel_map.apply(m.utt1), utt2=channel_map.apply(m.utt2)) for m in mixes]
    logger.info(f"Retargeted {len(out)} mixtures")
    return out


# List and table I/O

def write_mixture_list(path, mixes):
    with atomic_open(path) as f:
        for mix in mixes:
            f.write(mix.line() + "\n")
    logger.info(f"Wrote {len(mixes)} mixtures to {path}")


def read_mixture_list(path):
    if not os.path.exists(path):
        raise InputNotFoundError(path, "mixture list")
    mixes = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 4:
                raise AnnotationError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
            try:
                mixes.append(MixtureSpec(fields[0], fields[2], float(fields[1]), float(fields[3])))
            except ValueError as e:
                raise AnnotationError(f"{path}:{lineno}: {e}")
    return mixes


def read_utterance_table(path):
    """TSV: utt_id, speaker, length_s, path."""
    if not os.path.exists(path):
        raise InputNotFoundError(path, "utterance table")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 4:
                raise AnnotationError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                records.append(UtteranceRecord(row[0], row[1], float(row[2]), path=row[3]))
            except ValueError as e:
                raise AnnotationError(f"{path}:{lineno}: {e}")
    return records


def write_trace(path, traces):
    with atomic_open(path) as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["index", "utt1", "utt2", "min_usage", "u1_usage", "u2_usage",
                         "s1_size", "s2_size", "s3_size", "relaxations", "resets", "length_diff"])
        for t in traces:
            writer.writerow([t.index, t.utt1, t.utt2, t.min_usage, t.u1_usage, t.u2_usage,
                             t.s1_size, t.s2_size, t.s3_size, t.relaxations, t.resets,
                             f"{t.length_diff:.4f}"])
