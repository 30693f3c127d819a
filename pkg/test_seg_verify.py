import numpy as np
import pytest

from audio_io import Waveform
from conftest import RATE, band_noise, speaker_audio
from errors import (AnnotationError, ConfigError, DegenerateInputError,
                    EnrollmentError)
from seg_verify import (SpeakerProfile, enroll, read_scores, score,
                        segment_embedding, verify, write_report)
from segmenter import CandidateSegment


def _segments(speaker, count, seconds=3.0, seed=0, audio_speaker=None):
    """(segment, audio) pairs; `audio_speaker` lets a segment carry someone else's voice."""
    pairs = []
    for k in range(count):
        seg = CandidateSegment("rec1", speaker, 10.0 * k, 10.0 * k + seconds)
        pairs.append((seg, speaker_audio(audio_speaker or speaker, seconds, seed + k)))
    return pairs


def test_embedding_length():
    emb, n_frames = segment_embedding(speaker_audio("spka", 2.0, 1))
    assert emb.shape == (2 * 257,)
    assert n_frames == (16000 - 512) // 128 + 1


def test_silence_is_degenerate():
    with pytest.raises(DegenerateInputError):
        segment_embedding(Waveform(np.zeros(RATE), RATE))


def test_identical_segments_profile():
    """Enrolling copies of one segment gives that segment's embedding."""
    audio = speaker_audio("spka", 3.0, 5)
    seg = CandidateSegment("rec1", "spka", 0.0, 3.0)
    profile = enroll("spka", [(seg, audio)] * 4, min_total_s=10.0)
    np.testing.assert_allclose(profile.embedding, segment_embedding(audio)[0])


def test_profile_is_mean_for_equal_frames():
    a = speaker_audio("spka", 6.0, 1)
    b = speaker_audio("spkb", 6.0, 2)
    seg = CandidateSegment("rec1", "spka", 0.0, 6.0)
    profile = enroll("spka", [(seg, a), (seg, b)], min_total_s=10.0)
    expected = (segment_embedding(a)[0] + segment_embedding(b)[0]) / 2
    np.testing.assert_allclose(profile.embedding, expected)


def test_enroll_needs_enough_audio():
    with pytest.raises(EnrollmentError):
        enroll("spka", _segments("spka", 3, seconds=3.0))


def test_white_vs_lowpass_embeddings_differ():
    """Low bins carry more of a 300 Hz-band signal's energy than white noise does."""
    white = Waveform(np.random.default_rng(3).standard_normal(3 * RATE) * 0.1, RATE)
    low = Waveform(band_noise(200, 400, 3.0, 4), RATE)
    e_white, _ = segment_embedding(white)
    e_low, _ = segment_embedding(low)
    low_bins = slice(13, 26)
    high_bins = slice(150, 250)
    assert e_low[low_bins].mean() - e_low[high_bins].mean() > \
        e_white[low_bins].mean() - e_white[high_bins].mean() + 5


def test_self_score_beats_cross_score():
    profile_a = enroll("spka", _segments("spka", 4))
    same = score(profile_a, speaker_audio("spka", 3.0, 100))
    other = score(profile_a, speaker_audio("spkc", 3.0, 101))
    assert -1.0 <= other < same <= 1.0


def test_self_score_of_enrollment_audio():
    audio = speaker_audio("spkb", 12.0, 9)
    profile = enroll("spkb", [(CandidateSegment("rec1", "spkb", 0.0, 12.0), audio)])
    assert score(profile, audio) >= 0.999


def test_score_ordering_survives_gain():
    profile_a = enroll("spka", _segments("spka", 4))
    for gain in (0.5, 1.0, 2.0):
        same = score(profile_a, Waveform(speaker_audio("spka", 3.0, 100).samples * gain, RATE))
        other = score(profile_a, Waveform(speaker_audio("spkc", 3.0, 101).samples * gain, RATE))
        assert same > other


def test_profile_rejects_nonfinite():
    with pytest.raises(DegenerateInputError):
        SpeakerProfile("spka", np.array([np.nan]), 3)
    with pytest.raises(EnrollmentError):
        SpeakerProfile("spka", np.zeros(2), 0)


def test_verify_rejects_mislabeled_segment():
    """The one segment carrying another speaker's voice is the only rejection."""
    profiles = {"spka": enroll("spka", _segments("spka", 4)),
                "spkb": enroll("spkb", _segments("spkb", 4, seed=10))}
    pairs = _segments("spka", 3, seed=50) + _segments("spkb", 3, seed=60)
    bad = (CandidateSegment("rec2", "spka", 0.0, 3.0), speaker_audio("spkd", 3.0, 70))
    pairs.append(bad)

    scores = [score(profiles[seg.speaker], audio) for seg, audio in pairs]
    threshold = (max(scores[-1:]) + min(scores[:-1])) / 2
    kept, rejected = verify(profiles, pairs, threshold)
    assert [r.utt_id for r in rejected] == [bad[0].utt_id]
    assert len(kept) + len(rejected) == len(pairs)


def test_verify_extreme_thresholds():
    profiles = {"spka": enroll("spka", _segments("spka", 4))}
    pairs = _segments("spka", 3, seed=20)
    kept, rejected = verify(profiles, pairs, -1.0)
    assert len(kept) == 3 and not rejected
    kept, rejected = verify(profiles, pairs, 1.01)
    assert not kept and len(rejected) == 3


def test_verify_contract_errors():
    pairs = _segments("spka", 1)
    with pytest.raises(ConfigError):
        verify({}, pairs, None)
    with pytest.raises(ConfigError):
        verify({}, pairs, 0.5)


def test_external_scores(tmp_path):
    """Precomputed scores replace the built-in scorer."""
    path = tmp_path / "scores.tsv"
    pairs = [(seg, None) for seg, _ in _segments("spka", 2, seconds=2.0)]
    ids = [seg.utt_id for seg, _ in pairs]
    path.write_text(f"{ids[0]}\t0.9\n{ids[1]}\t0.1\n")
    kept, rejected = verify({}, pairs, 0.5, external_scores=read_scores(str(path)))
    assert [r.utt_id for r in kept] == [ids[0]]
    assert [r.utt_id for r in rejected] == [ids[1]]

    report = tmp_path / "report.tsv"
    write_report(str(report), kept, rejected)
    assert report.read_text().splitlines() == [f"{ids[0]}\t0.900000\tkept", f"{ids[1]}\t0.100000\trejected"]

    path.write_text("only-one-column\n")
    with pytest.raises(AnnotationError):
        read_scores(str(path))
