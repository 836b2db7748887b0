import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_roll
from pianodiff.metrics import (
    ALL_LABELS,
    MetricReport,
    SegmentScore,
    chord_accuracy,
    chord_similarity,
    extract_chords,
    grooving_similarity,
    observe_chords,
    ook,
    score_segment,
)
from pianodiff.roll import (
    MASK,
    OFF,
    ChordLabel,
    ChordQuality,
    ChordSpan,
    KeySignature,
    PianoRoll,
    chord_to_pitches,
    roll_from_notes,
    transpose,
)

C = KeySignature(0)
C_MAJ = ChordLabel(0, ChordQuality.MAJ)


def held(pitches, n_frames, start=0, stop=None):
    stop = n_frames if stop is None else stop
    return roll_from_notes([(p, start, stop) for p in pitches], n_frames)[0]


def block_chords(labels, frames_each=4):
    notes = []
    for i, lb in enumerate(labels):
        notes += [(p, i * frames_each, (i + 1) * frames_each) for p in chord_to_pitches(lb)]
    return roll_from_notes(notes, len(labels) * frames_each)[0]


def test_ook_examples():
    scale = [60, 62, 64, 65, 67, 69, 71, 72]
    assert ook(roll_from_notes([(p, i, i + 1) for i, p in enumerate(scale)], 8)[0], C) == 0.0
    notes = [(p, i, i + 1) for i, p in enumerate(scale[:7])] + [(66, 7, 8)]
    assert ook(roll_from_notes(notes, 8)[0], C) == 0.125
    assert ook(PianoRoll.empty(4), C) == 0.0


def test_ook_counts_onsets_not_frames():
    roll = roll_from_notes([(61, 0, 8), (60, 0, 1)], 8)[0]
    assert ook(roll, C) == 0.5


def test_metrics_reject_mask():
    cells = np.full((4, 88), OFF, dtype=np.uint8)
    cells[0, 0] = MASK
    with pytest.raises(ValueError):
        ook(PianoRoll(cells), C)


def test_extract_triad_and_seventh():
    assert extract_chords(held([48, 52, 55], 4)) == [C_MAJ]
    # all four tones are chord tones under C:7; C:maj pays 0.5 for the B-flat
    assert extract_chords(held([48, 52, 55, 58], 4)) == [ChordLabel(0, ChordQuality.DOM7)]


def test_template_scores_by_hand():
    obs = observe_chords(held([48, 52, 55, 58], 4))[0]
    assert obs.histogram.tolist() == [4, 0, 0, 0, 4, 0, 0, 4, 0, 0, 4, 0]
    # dom7: 16 in, 0 out -> 1.0; maj: 12 in, 4 out -> (12 - 2) / 16
    assert obs.score == pytest.approx(1.0)


def test_empty_beats_carry_or_no_chord():
    roll = roll_from_notes([(p, 4, 8) for p in (48, 52, 55)], 12)[0]
    assert extract_chords(roll) == [None, C_MAJ, C_MAJ]


@pytest.mark.parametrize("label", ALL_LABELS, ids=str)
def test_closed_loop_every_label(label):
    assert extract_chords(block_chords([label] * 2)) == [label, label]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(ALL_LABELS), min_size=1, max_size=6), st.integers(-12, 12))
def test_extraction_transposition_equivariant(labels, k):
    roll = block_chords(labels)
    up, dropped = transpose(roll, k)
    assert dropped == 0
    shifted = [lb.transposed(k) for lb in extract_chords(roll)]
    assert extract_chords(up) == shifted


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-5, 6))
def test_extraction_equivariant_on_random_rolls(seed, k):
    rng = np.random.default_rng(seed)
    notes = [(int(rng.integers(36, 96)), int(s), int(s) + int(rng.integers(1, 6))) for s in rng.integers(0, 28, 12)]
    roll = roll_from_notes(notes, 32)[0]
    up, _ = transpose(roll, k)
    base = extract_chords(roll)
    assert extract_chords(up) == [None if lb is None else lb.transposed(k) for lb in base]


def test_chord_accuracy_examples():
    g = ChordLabel(7, ChordQuality.MAJ)
    ref = [C_MAJ, C_MAJ, g, g]
    assert chord_accuracy(ref, ref) == 1.0
    assert chord_accuracy([g, g, C_MAJ, C_MAJ], ref) == 0.0
    assert chord_accuracy([C_MAJ, C_MAJ, g, C_MAJ], ref) == 0.75
    assert chord_accuracy([None], [None]) == 0.0
    with pytest.raises(ValueError):
        chord_accuracy(ref, ref[:3])


@given(st.lists(st.tuples(st.sampled_from(ALL_LABELS + (None,)), st.sampled_from(ALL_LABELS + (None,))), min_size=1))
def test_chord_accuracy_symmetric(pairs):
    a, b = [p[0] for p in pairs], [p[1] for p in pairs]
    assert chord_accuracy(a, b) == chord_accuracy(b, a)
    assert 0.0 <= chord_accuracy(a, b) <= 1.0


def test_chord_similarity_examples():
    roll = held([48, 52, 55], 32)
    assert chord_similarity(roll, [ChordSpan(0, 8, C_MAJ)]) == pytest.approx(1.0)
    assert chord_similarity(roll, [ChordSpan(0, 8, ChordLabel(9, ChordQuality.MIN))]) == pytest.approx(2 / 3)
    assert chord_similarity(PianoRoll.empty(32), [ChordSpan(0, 8, C_MAJ)]) == 0.0
    with pytest.raises(ValueError):
        chord_similarity(PianoRoll.empty(16), [])


def test_chord_similarity_with_chord_changes():
    g = ChordLabel(7, ChordQuality.MAJ)
    labels = [C_MAJ] * 4 + [g] * 4
    spans = [ChordSpan(i, i + 1, lb) for i, lb in enumerate(labels)]
    assert chord_similarity(block_chords(labels), spans) == pytest.approx(1.0)


def test_grooving_examples():
    a = [(60, q, q + 1) for q in (0, 4, 8, 12)]
    same = roll_from_notes(a + [(p + 1, t + 16, e + 16) for p, t, e in a], 32)[0]
    assert grooving_similarity(same) == 1.0
    # second bar adds onsets at 1, 13, 14, 15
    diff4 = roll_from_notes(a + [(60, q + 16, q + 17) for q in (0, 1, 4, 8, 12, 13, 14, 15)], 32)[0]
    assert grooving_similarity(diff4) == 0.75
    assert grooving_similarity(PianoRoll.empty(48)) == 1.0
    with pytest.raises(ValueError):
        grooving_similarity(PianoRoll.empty(16))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-5, 6))
def test_metric_ranges_and_gs_transposition(seed, k):
    rng = np.random.default_rng(seed)
    roll = random_roll(rng, 64, 0.03)
    chords = [ChordSpan(i, i + 1, ALL_LABELS[j]) for i, j in enumerate(rng.integers(0, 84, 16))]
    s = score_segment("x", roll, KeySignature(int(rng.integers(0, 12))), chords)
    assert 0 <= s.ook <= 1 and 0 <= s.ca <= 1 and 0 <= s.cs <= 1 and 0 <= s.gs <= 1
    up, dropped = transpose(roll, k)
    if dropped == 0:
        assert grooving_similarity(up) == s.gs


def test_report_serialization():
    rep = MetricReport([SegmentScore("a", 0.0, 1.0, 0.5, 1.0), SegmentScore("b", 0.5, 0.5, 0.25, 0.75)])
    assert rep.to_text() == "segments=2\nook=0.250000\nca=0.750000\ncs=0.375000\ngs=0.875000\n"
    assert rep.to_csv().splitlines() == [
        "segment_id,ook,ca,cs,gs",
        "a,0.000000,1.000000,0.500000,1.000000",
        "b,0.500000,0.500000,0.250000,0.750000",
    ]
