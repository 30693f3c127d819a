"""Segment verification against enrolled speaker profiles.

The built-in scorer embeds a segment as the per-bin mean and standard deviation
of its log-magnitude STFT and compares embeddings by cosine similarity.
Precomputed scores from any external system can replace it.
"""

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from dsp_stft import HOP, WINDOW_LEN, magnitude, stft
from errors import (AnnotationError, ConfigError, DegenerateInputError,
                    EnrollmentError, InputNotFoundError)
from manifest import atomic_open

logger = logging.getLogger(__name__)

MIN_ENROLL_S = 10.0
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class SpeakerProfile:
    speaker: str
    embedding: np.ndarray = field(repr=False)
    n_frames: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.embedding)):
            raise DegenerateInputError(f"profile for {self.speaker} is not finite")
        if self.n_frames <= 0:
            raise EnrollmentError(f"profile for {self.speaker} built from no frames")


@dataclass(frozen=True)
class VerificationResult:
    utt_id: str
    speaker: str
    score: float
    kept: bool
    segment: object = field(default=None, repr=False, compare=False)


def segment_embedding(w, window_len=WINDOW_LEN, hop=HOP):
    """Mean and std of log-magnitude bins over frames; returns (embedding, n_frames)."""
    if not np.any(w.samples):
        raise DegenerateInputError("segment has zero energy")
    log_mag = np.log(magnitude(stft(w, window_len, hop)) + LOG_FLOOR)
    embedding = np.concatenate([log_mag.mean(axis=0), log_mag.std(axis=0)])
    return embedding, log_mag.shape[0]


def enroll(speaker, segments, min_total_s=MIN_ENROLL_S, window_len=WINDOW_LEN, hop=HOP):
    """Frame-weighted mean of per-segment embeddings over all of a speaker's audio."""
    total_s = sum(audio.duration_s for _, audio in segments)
    if total_s < min_total_s:
        raise EnrollmentError(
            f"speaker {speaker}: {total_s:.2f} s of audio, {min_total_s:.2f} s needed to enroll")

    weighted = None
    n_total = 0
    for _, audio in segments:
        emb, n = segment_embedding(audio, window_len, hop)
        weighted = emb * n if weighted is None else weighted + emb * n
        n_total += n

    logger.debug(f"Enrolled {speaker} from {len(segments)} segments ({total_s:.1f} s, {n_total} frames)")
    return SpeakerProfile(speaker, weighted / n_total, n_total)


def score(profile, segment_audio, window_len=WINDOW_LEN, hop=HOP):
    """Cosine similarity in [-1, 1] between the profile and the segment embedding."""
    emb, _ = segment_embedding(segment_audio, window_len, hop)
    norm = np.linalg.norm(profile.embedding) * np.linalg.norm(emb)
    if norm == 0:
        raise DegenerateInputError(f"zero-norm embedding while scoring against {profile.speaker}")
    return float(np.clip(np.dot(profile.embedding, emb) / norm, -1.0, 1.0))


def verify(profiles, segments, threshold, external_scores=None, window_len=WINDOW_LEN, hop=HOP):
    """Partition (segment, audio) pairs into kept and rejected by score >= threshold.

    With `external_scores` (utt_id -> score) the audio is not needed and
    profiles are not consulted.
    """
    if threshold is None:
        raise ConfigError("a verification threshold must be supplied")

    kept, rejected = [], []
    for seg, audio in segments:
        if external_scores is not None:
            if seg.utt_id not in external_scores:
                raise ConfigError(f"no external score for {seg.utt_id}")
            value = float(external_scores[seg.utt_id])
        else:
            if seg.speaker not in profiles:
                raise ConfigError(f"no enrolled profile for speaker {seg.speaker}")
            value = score(profiles[seg.speaker], audio, window_len, hop)

        result = VerificationResult(seg.utt_id, seg.speaker, value, value >= threshold, seg)
        (kept if result.kept else rejected).append(result)
        logger.debug(f"{seg.utt_id}: score {value:.4f} -> {'kept' if result.kept else 'rejected'}")

    logger.info(f"Verification at threshold {threshold}: kept {len(kept)}, rejected {len(rejected)}")
    return kept, rejected


def read_scores(path):
    """TSV: utt_id, score."""
    if not os.path.exists(path):
        raise InputNotFoundError(path, "score file")
    scores = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f, delimiter="\t"), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise AnnotationError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                scores[row[0]] = float(row[1])
            except ValueError as e:
                raise AnnotationError(f"{path}:{lineno}: {e}")
    return scores


def write_report(path, kept, rejected):
    """TSV: utt_id, score, kept|rejected; sorted by utt_id."""
    rows = sorted(kept + rejected, key=lambda r: r.utt_id)
    with atomic_open(path) as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        for r in rows:
            writer.writerow([r.utt_id, f"{r.score:.6f}", "kept" if r.kept else "rejected"])
    logger.info(f"Wrote verification report for {len(rows)} segments to {path}")
