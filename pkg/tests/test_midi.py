import io

import mido
import numpy as np
import pytest
from hypothesis import given, settings

from helpers import rolls

from pianodiff.midi import MeterError, MidiError, _quantize, list_tracks, midi_to_roll, read_midi, roll_to_midi
from pianodiff.roll import MASK, OFF, ONSET, SUSTAIN, PianoRoll, RollError, roll_from_notes


def smf(tracks, tpb=480, fmt=1, extra_meta=()):
    """Build an SMF from per-track lists of (abs_tick, kind, note) where kind is 'on'/'off'."""
    mid = mido.MidiFile(type=fmt, ticks_per_beat=tpb)
    for i, events in enumerate(tracks):
        tr = mido.MidiTrack()
        tr.append(mido.MetaMessage("track_name", name=f"t{i}", time=0))
        if i == 0:
            for m in extra_meta:
                tr.append(m)
        now = 0
        for tick, kind, note in sorted(events, key=lambda e: (e[0], e[1] == "on")):
            vel = 64 if kind == "on" else 0
            tr.append(mido.Message("note_on" if kind == "on" else "note_off", note=note, velocity=vel, time=tick - now))
            now = tick
        mid.tracks.append(tr)
    buf = io.BytesIO()
    mid.save(file=buf)
    return buf.getvalue()


def test_single_quarter_note():
    data = smf([[(0, "on", 60), (480, "off", 60)]], extra_meta=[mido.MetaMessage("set_tempo", tempo=500000)])
    imp = read_midi(data, n_frames=8)
    assert imp.tempo_bpm == pytest.approx(120.0)
    expected = np.full((8, 88), OFF, dtype=np.uint8)
    expected[0, 39] = ONSET
    expected[1:4, 39] = SUSTAIN
    assert np.array_equal(imp.roll.cells, expected)


def test_empty_track_gives_all_off():
    roll = midi_to_roll(smf([[]]), n_frames=16)
    assert roll == PianoRoll.empty(16)


def test_overlapping_same_pitch_retriggers():
    data = smf([[(0, "on", 60), (480, "on", 60), (960, "off", 60), (1440, "off", 60)]])
    col = midi_to_roll(data, n_frames=16).cells[:, 39]
    assert list(np.flatnonzero(col == ONSET)) == [0, 4]
    assert list(np.flatnonzero(col == SUSTAIN)) == [1, 2, 3, *range(5, 12)]
    assert (col[12:] == OFF).all()


def test_quantize_round_half_up():
    # a 16th is 120 ticks at 480 per beat; 60 is exactly halfway
    assert [_quantize(t, 480) for t in (0, 59, 60, 119, 120, 179, 180)] == [0, 0, 1, 1, 1, 1, 2]
    assert [_quantize(t, 24) for t in (2, 3, 8, 9)] == [0, 1, 1, 2]


def test_zero_length_note_keeps_one_frame():
    roll = midi_to_roll(smf([[(0, "on", 60), (10, "off", 60)]]), n_frames=4)
    assert roll.notes() == [(60, 0, 1)]


def test_out_of_range_notes_dropped():
    imp = read_midi(smf([[(0, "on", 10), (120, "off", 10), (0, "on", 60), (120, "off", 60)]]), n_frames=4)
    assert imp.dropped == 1
    assert imp.roll.notes() == [(60, 0, 1)]


def test_non_four_four_rejected():
    data = smf([[(0, "on", 60), (480, "off", 60)]], extra_meta=[mido.MetaMessage("time_signature", numerator=3, denominator=4)])
    with pytest.raises(MeterError):
        read_midi(data)


def test_garbage_rejected():
    with pytest.raises(MidiError):
        read_midi(b"not a midi file")


def test_track_selection_by_index_and_name():
    data = smf([[(0, "on", 72), (480, "off", 72)], [(0, "on", 48), (480, "off", 48)]])
    assert midi_to_roll(data, 4, tracks=[0]).notes() == [(72, 0, 4)]
    assert midi_to_roll(data, 4, tracks=["t1"]).notes() == [(48, 0, 4)]
    assert midi_to_roll(data, 4).notes() == [(48, 0, 4), (72, 0, 4)]
    assert [t.n_notes for t in list_tracks(data)] == [1, 1]
    with pytest.raises(MidiError):
        midi_to_roll(data, 4, tracks=["nope"])


def test_default_length_covers_last_note():
    imp = read_midi(smf([[(0, "on", 60), (1000, "off", 60)]]))
    assert imp.n_frames == 9


def test_emit_single_note():
    cells = np.full((4, 88), OFF, dtype=np.uint8)
    cells[0, 39] = ONSET
    cells[1:, 39] = SUSTAIN
    mid = mido.MidiFile(file=io.BytesIO(roll_to_midi(PianoRoll(cells))))
    ons = [m for m in mid.tracks[0] if m.type == "note_on" and m.velocity > 0]
    offs = [m for m in mid.tracks[0] if m.type == "note_off"]
    assert [(m.note, m.velocity) for m in ons] == [(60, 80)]
    assert len(offs) == 1 and offs[0].time == 4 * 120


def test_emit_all_off_has_no_notes():
    mid = mido.MidiFile(file=io.BytesIO(roll_to_midi(PianoRoll.empty(16))))
    assert not [m for m in mid.tracks[0] if m.type in ("note_on", "note_off")]


def test_emit_rejects_mask():
    cells = np.full((2, 88), OFF, dtype=np.uint8)
    cells[0, 0] = MASK
    with pytest.raises(RollError):
        roll_to_midi(PianoRoll(cells))


@settings(max_examples=60, deadline=None)
@given(rolls(max_frames=128))
def test_round_trip_any_tempo(roll):
    for bpm in (60.0, 133.0):
        assert midi_to_roll(roll_to_midi(roll, bpm)) == roll


def test_round_trip_retrigger():
    roll, _ = roll_from_notes([(60, 0, 1), (60, 1, 2), (60, 2, 5)], 6)
    assert midi_to_roll(roll_to_midi(roll)) == roll
