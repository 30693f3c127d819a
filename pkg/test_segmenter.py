import json

import numpy as np
import pytest

from audio_io import Waveform, read_wav, write_wav
from conftest import RATE, band_noise
from errors import AnnotationError, ConfigError
from segmenter import (AnnotationSegment, CandidateSegment, FrameLabels,
                       RecordingCache, RecordingEntry, SadParams, energy_regions,
                       extract_utterances, length_filter, lookup_recording,
                       make_utt_id, read_annotations, read_frame_labels,
                       read_recordings, read_segments, sad_refine,
                       single_speaker_regions, write_segments)


def _ann(speaker, start, end, recording="rec1"):
    return AnnotationSegment(speaker, recording, start, end)


def _bursts(intervals, total_s, seed=0, rate=RATE, floor_rms=0.0):
    """Band noise inside the given intervals, silence (or a faint floor) elsewhere."""
    n = int(round(total_s * rate))
    x = np.zeros(n)
    for k, (start, end) in enumerate(intervals):
        a, b = int(round(start * rate)), int(round(end * rate))
        x[a:b] = band_noise(300, 900, (b - a) / rate, seed + k, rate)
    if floor_rms:
        x += floor_rms * np.random.default_rng(seed + 99).standard_normal(n)
    return Waveform(x, rate)


def _f1(found, truth, tol=0.05):
    matched = sum(1 for s, e in found
                  if any(abs(s - ts) <= tol and abs(e - te) <= tol for ts, te in truth))
    if not found or not truth:
        return 0.0
    precision, recall = matched / len(found), matched / len(truth)
    return 0.0 if matched == 0 else 2 * precision * recall / (precision + recall)


def test_utt_id_format():
    """Utterance ids are speaker, recording and zero-padded millisecond times."""
    assert make_utt_id("spk1", "rec7", 1.2345, 3.5) == "spk1_rec7_0001234_0003500"
    seg = CandidateSegment("rec7", "spk1", 1.2345, 3.5)
    assert seg.utt_id == "spk1_rec7_0001234_0003500"


def test_annotation_rejects_bad_interval():
    with pytest.raises(AnnotationError):
        _ann("A", 5.0, 5.0)
    with pytest.raises(AnnotationError):
        _ann("A", -1.0, 2.0)


def test_single_speaker_only():
    """One speaker alone gives one region."""
    regions = single_speaker_regions([_ann("A", 0, 10)], "rec1")
    assert [(r.speaker, r.start_s, r.end_s) for r in regions] == [("A", 0, 10)]


def test_single_speaker_overlap_split():
    """Another speaker inside A's turn cuts A's region in two."""
    regions = single_speaker_regions([_ann("A", 0, 10), _ann("B", 4, 6)], "rec1")
    assert [(r.speaker, r.start_s, r.end_s) for r in regions] == [("A", 0, 4), ("A", 6, 10)]


def test_single_speaker_full_overlap_empty():
    assert single_speaker_regions([_ann("A", 0, 5), _ann("B", 0, 5)], "rec1") == []
    assert single_speaker_regions([], "rec1") == []


def test_single_speaker_rejects_other_recording():
    with pytest.raises(ConfigError):
        single_speaker_regions([_ann("A", 0, 5, recording="rec2")], "rec1")


def test_single_speaker_regions_tile_grid(rng):
    """Regions match a 10 ms grid brute force and never overlap."""
    annotations = []
    for speaker in ("A", "B", "C"):
        for _ in range(4):
            start = round(float(rng.uniform(0, 28)), 2)
            annotations.append(_ann(speaker, start, round(start + float(rng.uniform(0.5, 4)), 2)))
    regions = single_speaker_regions(annotations, "rec1")

    grid = np.arange(0, 3300) * 0.01 + 0.005
    for t in grid:
        active = {a.speaker for a in annotations if a.start_s <= t < a.end_s}
        owner = [r.speaker for r in regions if r.start_s <= t < r.end_s]
        if len(active) == 1:
            assert owner == list(active)
        else:
            assert owner == []

    for a, b in zip(regions, regions[1:]):
        assert a.end_s <= b.start_s + 1e-9


def test_energy_regions_silent():
    silent = Waveform(np.zeros(RATE * 3), RATE)
    assert energy_regions(silent, silent) == []


def test_energy_regions_equal_channels():
    """A 0 dB ratio never passes the 6 dB threshold."""
    w = _bursts([(0.5, 2.5)], 3.0)
    assert energy_regions(w, w) == []


def test_energy_regions_loud_target():
    target = _bursts([(2.0, 4.0)], 6.0)
    other = Waveform(target.samples * 0.01, RATE)
    regions = energy_regions(target, other, -40.0, 6.0, 0.01, speaker="A", recording="rec1")
    assert len(regions) == 1
    assert abs(regions[0].start_s - 2.0) <= 0.01
    assert abs(regions[0].end_s - 4.0) <= 0.01
    assert regions[0].source == "energy"


def test_energy_regions_rate_mismatch():
    with pytest.raises(ConfigError):
        energy_regions(Waveform(np.zeros(8000), 8000), Waveform(np.zeros(16000), 16000))


def test_energy_regions_interval_f1():
    """Constructed dual-channel bursts are found within 50 ms."""
    truth = [(1.0, 3.0), (4.5, 6.0)]
    target = _bursts(truth, 7.0, floor_rms=1e-4)
    other = Waveform(target.samples * 0.1, RATE)
    regions = energy_regions(target, other, frame_s=0.01)
    assert _f1([(r.start_s, r.end_s) for r in regions], truth) >= 0.95


def test_sad_splits_at_pause():
    """Speech, 0.5 s pause, speech -> two segments."""
    w = _bursts([(0.0, 2.0), (2.5, 4.0)], 4.0)
    region = CandidateSegment("rec1", "A", 0.0, 4.0)
    segments = sad_refine(w, [region], SadParams(min_pause_s=0.3))
    assert len(segments) == 2
    first, second = segments
    assert first.start_s == pytest.approx(0.0, abs=0.03)
    assert 2.0 <= first.end_s <= 2.25
    assert second.start_s == pytest.approx(2.5, abs=0.03)
    assert second.end_s == pytest.approx(4.0, abs=1e-9)


def test_sad_bridges_short_pause():
    """A pause shorter than min_pause_s does not split."""
    w = _bursts([(0.0, 2.0), (2.15, 4.0)], 4.0)
    segments = sad_refine(w, [CandidateSegment("rec1", "A", 0.0, 4.0)], SadParams(min_pause_s=0.3))
    assert len(segments) == 1


def test_sad_drops_silent_region():
    w = _bursts([(0.0, 1.0)], 5.0)
    segments = sad_refine(w, [CandidateSegment("rec1", "A", 2.0, 5.0)])
    assert segments == []


def test_sad_continuous_speech_unchanged():
    w = _bursts([(0.0, 5.0)], 5.0)
    segments = sad_refine(w, [CandidateSegment("rec1", "A", 1.0, 4.0)])
    assert len(segments) == 1
    assert segments[0].start_s == pytest.approx(1.0, abs=0.025)
    assert segments[0].end_s == pytest.approx(4.0, abs=0.025)


def test_sad_stays_inside_regions(rng):
    """Refined segments never leave their input region."""
    w = _bursts([(0.3, 1.7), (2.2, 2.6), (3.0, 5.5), (6.1, 7.9)], 8.0, floor_rms=1e-4)
    regions = [CandidateSegment("rec1", "A", 0.0, 2.4), CandidateSegment("rec1", "A", 2.9, 6.5),
               CandidateSegment("rec1", "A", 6.8, 8.0)]
    for seg in sad_refine(w, regions):
        assert any(r.start_s - 1e-9 <= seg.start_s and seg.end_s <= r.end_s + 1e-9 for r in regions)


def test_sad_params_validate():
    with pytest.raises(ConfigError):
        SadParams(on_db=-30.0, off_db=-20.0)
    with pytest.raises(ConfigError):
        SadParams(step_s=0.0)


def test_sad_external_labels():
    """Frame labels replace the energy decisions."""
    speech = np.zeros(400, dtype=bool)
    speech[100:200] = True
    speech[260:400] = True
    labels = FrameLabels(0.01, speech)
    w = Waveform(np.zeros(4 * RATE), RATE)
    segments = sad_refine(w, [CandidateSegment("rec1", "A", 0.0, 4.0)],
                          SadParams(hangover_s=0.0), labels=labels)
    assert [(round(s.start_s, 3), round(s.end_s, 3)) for s in segments] == [(1.0, 2.0), (2.6, 4.0)]


def test_read_frame_labels(tmp_path):
    path = tmp_path / "rec1.txt"
    path.write_text("0\n1\n1\n0\n")
    labels = read_frame_labels(str(path), 0.01)
    assert labels.speech.tolist() == [False, True, True, False]
    path.write_text("0\n2\n")
    with pytest.raises(AnnotationError):
        read_frame_labels(str(path), 0.01)


def test_length_filter_boundary():
    """1.2 s is dropped, 1.3 s is kept."""
    short = CandidateSegment("rec1", "A", 0.0, 1.2)
    exact = CandidateSegment("rec1", "A", 2.0, 3.3)
    assert length_filter([short, exact]) == [exact]
    assert length_filter([]) == []


def test_segments_roundtrip_sorted(tmp_path):
    segments = [CandidateSegment("rec2", "B", 0.5, 2.5), CandidateSegment("rec1", "A", 3.0, 5.0),
                CandidateSegment("rec1", "A", 0.0, 1.5)]
    path = tmp_path / "segs.tsv"
    write_segments(str(path), segments)
    loaded = read_segments(str(path))
    assert [(s.recording, s.start_s) for s in loaded] == [("rec1", 0.0), ("rec1", 3.0), ("rec2", 0.5)]
    assert path.read_text().splitlines()[0].split("\t")[0] == "A_rec1_0000000_0001500"


def test_read_annotations_json_and_tsv(tmp_path):
    json_path = tmp_path / "ann.json"
    json_path.write_text(json.dumps({"rec1": [{"speaker": "A", "start_s": 0, "end_s": 4}]}))
    assert read_annotations(str(json_path))["rec1"][0].end_s == 4.0

    tsv_path = tmp_path / "ann.tsv"
    tsv_path.write_text("rec1\tA\t0\t4\nrec1\tB\t2\t6\n")
    grouped = read_annotations(str(tsv_path))
    assert [a.speaker for a in grouped["rec1"]] == ["A", "B"]

    tsv_path.write_text("rec_1\tA\t0\t4\n")
    with pytest.raises(AnnotationError):
        read_annotations(str(tsv_path))


def test_recording_lookup_prefers_speaker_channel(tmp_path):
    path = tmp_path / "rec.tsv"
    path.write_text("rec1\tfar.wav\t0\nrec1\tnear.wav\t1\tA\n")
    table = read_recordings(str(path))
    assert lookup_recording(table, "rec1", "A") == RecordingEntry("rec1", "near.wav", 1, "A")
    assert lookup_recording(table, "rec1", "B").path == "far.wav"
    with pytest.raises(ConfigError):
        lookup_recording(table, "rec9")


def test_extract_resamples_to_working_rate(tmp_path):
    """Segments are cut, resampled to 8 kHz and listed in the utterance table."""
    source = Waveform(band_noise(300, 900, 4.0, 7, rate=16000), 16000)
    wav = tmp_path / "rec1.wav"
    write_wav(wav, source)
    recordings = {("rec1", ""): RecordingEntry("rec1", str(wav), 0)}
    segments = [CandidateSegment("rec1", "A", 0.5, 2.0)]

    rows = extract_utterances(segments, recordings, str(tmp_path / "utts"))
    utt_id, speaker, length_s, path = rows[0]
    assert utt_id == "A_rec1_0000500_0002000"
    assert speaker == "A"
    assert length_s == pytest.approx(1.5)
    out = read_wav(path)
    assert out.sample_rate_hz == 8000
    assert len(out) == 12000


def test_recording_cache_is_bounded(tmp_path):
    """Reading six recordings in turn never keeps more than four in memory."""
    cache = RecordingCache()
    entries = []
    for k in range(6):
        wav = tmp_path / f"rec{k}.wav"
        write_wav(wav, Waveform(band_noise(300, 900, 1.0, k), RATE))
        entries.append(RecordingEntry(f"rec{k}", str(wav), 0))

    for entry in entries + entries[:2]:
        cut = cache.cut(entry, CandidateSegment(entry.recording, "A", 0.25, 0.75))
        assert len(cache) <= 4
        assert len(cut) == RATE // 2
        assert not np.shares_memory(cut.samples, cache.read(entry).samples)
