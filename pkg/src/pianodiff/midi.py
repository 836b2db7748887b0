"""Standard MIDI File ingestion and emission for piano rolls.

Quantization works on the tick grid: a 16th note is ``ticks_per_beat / 4``
ticks, so the result does not depend on tempo changes. Tempo only matters
when writing, where the first set-tempo event determines playback speed.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from typing import Collection

import mido

from .roll import FRAMES_PER_BEAT, PianoRoll, RollError, roll_from_notes

log = logging.getLogger(__name__)

DEFAULT_TEMPO_BPM = 120.0
WRITE_TICKS_PER_BEAT = 480
VELOCITY = 80


class MidiError(ValueError):
    """The file cannot be parsed or is outside the supported subset."""


class MeterError(MidiError):
    """The file declares a time signature other than 4/4."""


@dataclass(frozen=True)
class MidiTrackInfo:
    index: int
    name: str
    n_notes: int


@dataclass(frozen=True)
class MidiImport:
    roll: PianoRoll
    dropped: int
    tempo_bpm: float
    n_frames: int


def _quantize(tick: int, tpb: int) -> int:
    # round half up: floor(tick * 4 / tpb + 1/2)
    return (2 * FRAMES_PER_BEAT * tick + tpb) // (2 * tpb)


def _open(data: bytes | mido.MidiFile) -> mido.MidiFile:
    if isinstance(data, mido.MidiFile):
        return data
    try:
        return mido.MidiFile(file=io.BytesIO(data))
    except Exception as exc:  # mido raises a zoo of types on garbage input
        raise MidiError(f"unparseable MIDI data: {exc}") from exc


def _select(mid: mido.MidiFile, tracks: Collection[int | str] | None) -> list[int]:
    if tracks is None:
        return list(range(len(mid.tracks)))
    out = []
    for sel in tracks:
        if isinstance(sel, int) or (isinstance(sel, str) and sel.strip().isdigit()):
            idx = int(sel)
            if not 0 <= idx < len(mid.tracks):
                raise MidiError(f"track index {idx} out of range ({len(mid.tracks)} tracks)")
            out.append(idx)
            continue
        hits = [i for i, t in enumerate(mid.tracks) if t.name.strip().lower() == sel.strip().lower()]
        if not hits:
            raise MidiError(f"no track named {sel!r}")
        out.extend(hits)
    return sorted(set(out))


def list_tracks(data: bytes) -> list[MidiTrackInfo]:
    mid = _open(data)
    return [
        MidiTrackInfo(i, t.name, sum(1 for m in t if m.type == "note_on" and m.velocity > 0))
        for i, t in enumerate(mid.tracks)
    ]


def read_midi(
    data: bytes | mido.MidiFile,
    n_frames: int | None = None,
    tracks: Collection[int | str] | None = None,
) -> MidiImport:
    """Parse an SMF (format 0 or 1) into a roll at 16th-note resolution.

    ``tracks`` selects track indices or names to merge (default: all).
    Without ``n_frames`` the roll spans up to the last event, at least one frame.
    Notes outside MIDI 21-108 are dropped and counted.
    """
    mid = _open(data)
    if mid.type not in (0, 1):
        raise MidiError(f"unsupported SMF format {mid.type}")
    tpb = mid.ticks_per_beat
    if tpb <= 0:
        raise MidiError("SMPTE time division is not supported")

    tempo = None
    last_tick = 0
    for track in mid.tracks:
        tick = 0
        for msg in track:
            tick += msg.time
            if msg.type == "time_signature" and (msg.numerator, msg.denominator) != (4, 4):
                raise MeterError(f"time signature {msg.numerator}/{msg.denominator} is not 4/4")
            if msg.type == "set_tempo" and tempo is None:
                tempo = mido.tempo2bpm(msg.tempo)
        last_tick = max(last_tick, tick)

    notes = []
    for ti in _select(mid, tracks):
        tick = 0
        open_notes: dict[tuple[int, int], list[int]] = {}
        for msg in mid.tracks[ti]:
            tick += msg.time
            if msg.type == "note_on" and msg.velocity > 0:
                open_notes.setdefault((msg.channel, msg.note), []).append(tick)
            elif msg.type == "note_off" or (msg.type == "note_on" and msg.velocity == 0):
                starts = open_notes.get((msg.channel, msg.note))
                if starts:
                    notes.append((msg.note, starts.pop(0), tick))
        for (_, pitch), starts in open_notes.items():
            notes.extend((pitch, s, tick) for s in starts)

    frames = [(p, _quantize(s, tpb), _quantize(e, tpb)) for p, s, e in notes]
    if n_frames is None:
        ends = [max(e, s + 1) for _, s, e in frames]
        n_frames = max([-(-FRAMES_PER_BEAT * last_tick // tpb), *ends, 1])
    out_of_range = sum(1 for p, _, _ in frames if not 21 <= p <= 108)
    roll, dropped = roll_from_notes(frames, n_frames)
    if dropped:
        log.warning("dropped %d notes (%d outside 21-108)", dropped, out_of_range)
    return MidiImport(roll, dropped, tempo if tempo is not None else DEFAULT_TEMPO_BPM, n_frames)


def midi_to_roll(
    data: bytes | mido.MidiFile,
    n_frames: int | None = None,
    tracks: Collection[int | str] | None = None,
) -> PianoRoll:
    return read_midi(data, n_frames, tracks).roll


def roll_to_midi(roll: PianoRoll, tempo_bpm: float = DEFAULT_TEMPO_BPM) -> bytes:
    """Emit a format-0 SMF with one note per ONSET·SUSTAIN* run at fixed velocity.

    The end-of-track marker sits at the last frame boundary so that reading the
    file back restores the exact frame count.
    """
    if roll.has_mask():
        raise RollError("cannot write a roll containing MASK cells")
    roll.check_sustain()
    step = WRITE_TICKS_PER_BEAT // FRAMES_PER_BEAT
    events = []
    for pitch, start, end in roll.notes():
        # offs sort before ons at equal ticks so retriggers pair correctly
        events.append((start * step, 1, pitch))
        events.append((end * step, 0, pitch))
    events.sort()

    track = mido.MidiTrack()
    track.append(mido.MetaMessage("set_tempo", tempo=mido.bpm2tempo(tempo_bpm), time=0))
    track.append(mido.MetaMessage("time_signature", numerator=4, denominator=4, time=0))
    now = 0
    for tick, is_on, pitch in events:
        kind = "note_on" if is_on else "note_off"
        track.append(mido.Message(kind, note=pitch, velocity=VELOCITY if is_on else 0, time=tick - now))
        now = tick
    track.append(mido.MetaMessage("end_of_track", time=roll.n_frames * step - now))

    mid = mido.MidiFile(type=0, ticks_per_beat=WRITE_TICKS_PER_BEAT)
    mid.tracks.append(track)
    buf = io.BytesIO()
    mid.save(file=buf)
    return buf.getvalue()
