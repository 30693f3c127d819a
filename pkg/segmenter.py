"""Single-speaker segmentation: annotation intersection or dual-channel energy,
refined by an energy SAD with hysteresis, then a minimum-length filter."""

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from audio_io import read_wav, resample_to, write_wav
from errors import AnnotationError, ConfigError, InputNotFoundError
from manifest import atomic_open

logger = logging.getLogger(__name__)

MIN_UTTERANCE_S = 1.3
# Tolerance for comparing boundary times computed in floating point
TIME_EPS = 1e-9
RECORDING_CACHE_SIZE = 4


@dataclass(frozen=True)
class AnnotationSegment:
    speaker: str
    recording: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0 <= self.start_s < self.end_s:
            raise AnnotationError(
                f"bad annotation {self.speaker}@{self.recording}: [{self.start_s}, {self.end_s}]")


@dataclass(frozen=True)
class CandidateSegment:
    recording: str
    speaker: str
    start_s: float
    end_s: float
    source: str = "transcript"

    def __post_init__(self):
        if self.end_s - self.start_s <= 0:
            raise AnnotationError(
                f"empty segment {self.speaker}@{self.recording}: [{self.start_s}, {self.end_s}]")
        if self.source not in ("transcript", "energy"):
            raise AnnotationError(f"unknown segment source: {self.source}")

    @property
    def duration_s(self):
        return self.end_s - self.start_s

    @property
    def utt_id(self):
        return make_utt_id(self.speaker, self.recording, self.start_s, self.end_s)


@dataclass(frozen=True)
class SadParams:
    frame_s: float = 0.025
    step_s: float = 0.010
    on_db: float = -20.0  # relative to the region's loudest frame
    off_db: float = -30.0
    abs_floor_db: float = -60.0  # dBFS; quieter frames are never speech
    hangover_s: float = 0.2
    min_pause_s: float = 0.3

    def __post_init__(self):
        if self.frame_s <= 0 or self.step_s <= 0:
            raise ConfigError("SAD frame and step must be positive")
        if self.off_db > self.on_db:
            raise ConfigError(f"SAD off threshold {self.off_db} dB above on threshold {self.on_db} dB")


@dataclass(frozen=True)
class FrameLabels:
    """Externally computed speech/non-speech decisions for one recording."""
    step_s: float
    speech: np.ndarray = field(repr=False)


def make_utt_id(speaker, recording, start_s, end_s):
    """`<speaker>_<recording>_<start-ms>_<end-ms>` with zero-padded times."""
    start_ms = int(round(start_s * 1000))
    end_ms = int(round(end_s * 1000))
    return f"{speaker}_{recording}_{start_ms:07d}_{end_ms:07d}"


def _check_identifier(value, what):
    if not value or "_" in value or any(c.isspace() for c in value):
        raise AnnotationError(f"{what} id {value!r} must be non-empty without '_' or whitespace")
    return value


# Annotation input

def read_annotations(path, recording=None):
    """Read annotations from JSON or TSV, grouped by recording."""
    if not os.path.exists(path):
        raise InputNotFoundError(path, "annotation file")
    if str(path).endswith(".json"):
        return _read_annotations_json(path, recording)
    return _read_annotations_tsv(path)


def _read_annotations_json(path, recording):
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise AnnotationError(f"cannot parse {path}: {e}")

    if isinstance(raw, list):
        # A bare array belongs to a single recording named by the caller or the file
        rec = recording or os.path.splitext(os.path.basename(path))[0]
        raw = {rec: raw}
    if not isinstance(raw, dict):
        raise AnnotationError(f"{path}: expected an array or an object of arrays")

    grouped = {}
    for rec, items in raw.items():
        segs = []
        for item in items:
            try:
                segs.append(AnnotationSegment(
                    _check_identifier(str(item["speaker"]), "speaker"),
                    _check_identifier(rec, "recording"),
                    float(item["start_s"]), float(item["end_s"])))
            except (KeyError, TypeError, ValueError) as e:
                raise AnnotationError(f"{path}: bad annotation {item!r}: {e}")
        grouped[rec] = segs
    return grouped


def _read_annotations_tsv(path):
    grouped = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 4:
                raise AnnotationError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            rec, spk, start, end = row
            try:
                seg = AnnotationSegment(_check_identifier(spk, "speaker"),
                                        _check_identifier(rec, "recording"),
                                        float(start), float(end))
            except ValueError as e:
                raise AnnotationError(f"{path}:{lineno}: {e}")
            grouped.setdefault(rec, []).append(seg)
    return grouped


# Initial segmentation

def single_speaker_regions(annotations, recording):
    """Maximal intervals covered by exactly one speaker's annotations."""
    for a in annotations:
        if a.recording != recording:
            raise ConfigError(f"annotation for {a.recording} passed for recording {recording}")
    if not annotations:
        return []

    points = sorted({a.start_s for a in annotations} | {a.end_s for a in annotations})
    regions = []
    for left, right in zip(points[:-1], points[1:]):
        active = {a.speaker for a in annotations if a.start_s <= left and a.end_s >= right}
        if len(active) != 1:
            continue
        speaker = active.pop()
        if regions and regions[-1][0] == speaker and abs(regions[-1][2] - left) < TIME_EPS:
            regions[-1][2] = right
        else:
            regions.append([speaker, left, right])

    segments = [CandidateSegment(recording, spk, start, end, "transcript")
                for spk, start, end in regions]
    logger.debug(f"{recording}: {len(segments)} single-speaker regions from {len(annotations)} annotations")
    return segments


def _frames_to_intervals(active, frame_start_s, frame_end_s):
    """Merge runs of active frames into (start, end) times."""
    intervals = []
    padded = np.concatenate([[False], np.asarray(active, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    for first, stop in zip(edges[::2], edges[1::2]):
        intervals.append((frame_start_s(first), frame_end_s(stop - 1)))
    return intervals


def energy_regions(target_ch, other_ch, energy_floor_db=-40.0, ratio_min_db=6.0,
                   frame_s=0.01, speaker="", recording=""):
    """Frames where the target channel is loud and dominates the other channel."""
    if target_ch.sample_rate_hz != other_ch.sample_rate_hz:
        raise ConfigError(
            f"channel sample rates differ: {target_ch.sample_rate_hz} vs {other_ch.sample_rate_hz}")
    rate = target_ch.sample_rate_hz
    n = max(1, int(round(frame_s * rate)))
    if abs(len(target_ch) - len(other_ch)) > n:
        raise ConfigError(f"channel lengths differ by more than one frame: "
                          f"{len(target_ch)} vs {len(other_ch)}")

    n_frames = min(len(target_ch), len(other_ch)) // n
    if n_frames == 0:
        return []
    e_target = np.mean(target_ch.samples[:n_frames * n].reshape(n_frames, n) ** 2, axis=1)
    e_other = np.mean(other_ch.samples[:n_frames * n].reshape(n_frames, n) ** 2, axis=1)

    peak = e_target.max()
    if peak <= 0:
        return []
    with np.errstate(divide="ignore", invalid="ignore"):
        level_db = 10 * np.log10(e_target / peak)
        ratio_db = 10 * np.log10(e_target / e_other)
    ratio_db = np.where(e_other == 0, np.where(e_target > 0, np.inf, 0.0), ratio_db)
    active = (level_db > energy_floor_db) & (ratio_db > ratio_min_db)

    frame_len_s = n / rate
    intervals = _frames_to_intervals(active, lambda i: i * frame_len_s, lambda i: (i + 1) * frame_len_s)
    segments = [CandidateSegment(recording, speaker, start, end, "energy") for start, end in intervals]
    logger.debug(f"{recording}/{speaker}: {int(active.sum())} of {n_frames} frames active, "
                 f"{len(segments)} energy regions")
    return segments


# SAD refinement

def _hysteresis(level_db, on_db, off_db, floor_db):
    """Two-threshold speech state machine over frame levels."""
    speech = np.zeros(level_db.shape[0], dtype=bool)
    state = False
    for i, level in enumerate(level_db):
        if level < floor_db:
            state = False
        elif state:
            state = level >= off_db
        else:
            state = level >= on_db
        speech[i] = state
    return speech


def _bridge_pauses(intervals, min_pause_s):
    """Join speech intervals separated by pauses shorter than `min_pause_s`."""
    merged = []
    for start, end in intervals:
        if merged and start - merged[-1][1] < min_pause_s - TIME_EPS:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return merged


def _region_speech(w, region, params):
    """Energy SAD inside one region; returns recording-relative intervals."""
    rate = w.sample_rate_hz
    win = int(round(params.frame_s * rate))
    step = int(round(params.step_s * rate))
    x = w.segment(region.start_s, region.end_s).samples
    if x.shape[0] < win:
        return []

    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::step]
    level_db = 10 * np.log10(np.mean(frames ** 2, axis=1) + 1e-20)
    peak_db = level_db.max()
    if peak_db < params.abs_floor_db:
        return []

    speech = _hysteresis(level_db, peak_db + params.on_db, peak_db + params.off_db, params.abs_floor_db)
    offset = region.start_s
    return _frames_to_intervals(
        speech,
        lambda i: offset + i * step / rate,
        lambda i: offset + (i * step + win) / rate)


def _label_speech(labels, region):
    """External frame labels restricted to one region."""
    first = int(np.floor(region.start_s / labels.step_s))
    last = int(np.ceil(region.end_s / labels.step_s))
    window = np.asarray(labels.speech[first:last], dtype=bool)
    intervals = _frames_to_intervals(
        window,
        lambda i: (first + i) * labels.step_s,
        lambda i: (first + i + 1) * labels.step_s)
    return [(max(s, region.start_s), min(e, region.end_s)) for s, e in intervals
            if min(e, region.end_s) > max(s, region.start_s)]


def sad_refine(w, regions, params=None, labels=None):
    """Split regions at pauses and drop non-speech, never leaving region bounds."""
    params = params or SadParams()
    refined = []
    for region in regions:
        if labels is not None:
            intervals = _label_speech(labels, region)
        else:
            intervals = _region_speech(w, region, params)
        merged = _bridge_pauses(intervals, params.min_pause_s)

        for k, (start, end) in enumerate(merged):
            # Hangover holds speech on after the last active frame
            limit = merged[k + 1][0] if k + 1 < len(merged) else region.end_s
            end = min(end + params.hangover_s, limit, region.end_s)
            start = max(start, region.start_s)
            if end - start > TIME_EPS:
                refined.append(CandidateSegment(region.recording, region.speaker, start, end, region.source))

    logger.debug(f"SAD refinement: {len(regions)} regions -> {len(refined)} segments")
    return sort_segments(refined)


def refine_recording(job):
    """Pool worker: (RecordingEntry, regions, SadParams, FrameLabels or None) -> segments."""
    entry, regions, params, labels = job
    w = read_wav(entry.path, channel=entry.channel)
    return sad_refine(w, regions, params, labels)


def read_frame_labels(path, step_s):
    """One 0/1 decision per line."""
    if not os.path.exists(path):
        raise InputNotFoundError(path, "frame label file")
    with open(path, "r", encoding="utf-8") as f:
        values = [line.strip() for line in f if line.strip()]
    if any(v not in ("0", "1") for v in values):
        raise AnnotationError(f"{path}: frame labels must be 0 or 1")
    return FrameLabels(step_s, np.array([v == "1" for v in values], dtype=bool))


def length_filter(segments, min_s=MIN_UTTERANCE_S):
    """Keep segments lasting at least `min_s` seconds (inclusive)."""
    kept = [s for s in segments if s.duration_s >= min_s - TIME_EPS]
    if len(kept) < len(segments):
        logger.info(f"Length filter dropped {len(segments) - len(kept)} segments shorter than {min_s} s")
    return kept


def sort_segments(segments):
    return sorted(segments, key=lambda s: (s.recording, s.speaker, s.start_s, s.end_s))


# Segment and recording tables

def write_segments(path, segments):
    """TSV: utt_id, recording, speaker, start_s, end_s."""
    with atomic_open(path) as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        for seg in sort_segments(segments):
            writer.writerow([seg.utt_id, seg.recording, seg.speaker,
                             f"{seg.start_s:.3f}", f"{seg.end_s:.3f}"])
    logger.info(f"Wrote {len(segments)} segments to {path}")


def read_segments(path):
    if not os.path.exists(path):
        raise InputNotFoundError(path, "segment file")
    segments = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 5:
                raise AnnotationError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            try:
                seg = CandidateSegment(row[1], row[2], float(row[3]), float(row[4]))
            except ValueError as e:
                raise AnnotationError(f"{path}:{lineno}: {e}")
            segments.append(seg)
    return segments


@dataclass(frozen=True)
class RecordingEntry:
    recording: str
    path: str
    channel: int = 0
    speaker: str = ""


def read_recordings(path):
    """TSV: recording, path, channel[, speaker]; keyed by (recording, speaker)."""
    if not os.path.exists(path):
        raise InputNotFoundError(path, "recording table")
    table = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) not in (3, 4):
                raise AnnotationError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(row)}")
            try:
                entry = RecordingEntry(row[0], row[1], int(row[2]), row[3] if len(row) == 4 else "")
            except ValueError as e:
                raise AnnotationError(f"{path}:{lineno}: {e}")
            table[(entry.recording, entry.speaker)] = entry
    return table


def lookup_recording(table, recording, speaker=""):
    """Per-speaker entry first (close-talking channels), then the recording default."""
    entry = table.get((recording, speaker)) or table.get((recording, ""))
    if entry is None:
        raise ConfigError(f"recording {recording} not in recording table")
    return entry


class RecordingCache:
    """Recently read recordings, at most `size` of them in memory at once."""

    def __init__(self, size=RECORDING_CACHE_SIZE):
        self.size = size
        self._audio = {}

    def __len__(self):
        return len(self._audio)

    def read(self, entry):
        key = (entry.path, entry.channel)
        if key not in self._audio:
            if len(self._audio) >= self.size:
                self._audio.clear()
            self._audio[key] = read_wav(entry.path, channel=entry.channel)
        return self._audio[key]

    def cut(self, entry, seg):
        """A segment's samples; Waveform copies them, so the recording is not pinned."""
        return self.read(entry).segment(seg.start_s, seg.end_s)


def extract_utterances(segments, recordings, outdir, target_hz=8000, float_output=False):
    """Cut segments out of their recordings and write one WAV per utterance."""
    os.makedirs(outdir, exist_ok=True)
    cache = RecordingCache()
    table = []
    for seg in sort_segments(segments):
        entry = lookup_recording(recordings, seg.recording, seg.speaker)
        audio = resample_to(cache.cut(entry, seg), target_hz)
        path = os.path.join(outdir, f"{seg.utt_id}.wav")
        write_wav(path, audio, float_output=float_output)
        table.append((seg.utt_id, seg.speaker, audio.duration_s, path))

    logger.info(f"Extracted {len(table)} utterances to {outdir}")
    return table


def write_utterance_table(path, rows):
    """TSV: utt_id, speaker, length_s, path."""
    with atomic_open(path) as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        for utt_id, speaker, length_s, wav_path in rows:
            writer.writerow([utt_id, speaker, f"{length_s:.4f}", wav_path])
