"""Piano-roll representation, chord/key labels and lead-sheet assembly.

A roll is a ``(frames, 88)`` grid of note states at 16th-note resolution.
Pitch index 0 is MIDI 21 (A0) and index 87 is MIDI 108 (C8).
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

N_PITCHES = 88
LOWEST_PITCH = 21
HIGHEST_PITCH = LOWEST_PITCH + N_PITCHES - 1
FRAMES_PER_BEAT = 4
FRAMES_PER_BAR = 16
CHORD_SHIFT = 24

PITCH_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
_NAME_TO_PC = {name: pc for pc, name in enumerate(PITCH_NAMES)}
_NAME_TO_PC.update({"DB": 1, "EB": 3, "GB": 6, "AB": 8, "BB": 10, "CB": 11, "FB": 4, "E#": 5, "B#": 0})


class NoteState(enum.IntEnum):
    ONSET = 0
    SUSTAIN = 1
    OFF = 2
    MASK = 3


N_STATES = len(NoteState)
ONSET, SUSTAIN, OFF, MASK = (int(s) for s in NoteState)


class RollError(ValueError):
    """Raised for rolls that violate the state grammar."""


def pitch_to_index(pitch: int) -> int:
    return pitch - LOWEST_PITCH


def index_to_pitch(index: int) -> int:
    return index + LOWEST_PITCH


def parse_pitch_class(token: str | int) -> int:
    if isinstance(token, (int, np.integer)):
        return int(token) % 12
    text = token.strip().upper()
    if text.lstrip("-").isdigit():
        return int(text) % 12
    try:
        return _NAME_TO_PC[text]
    except KeyError:
        raise ValueError(f"unknown pitch class {token!r}") from None


class PianoRoll:
    """Immutable ``(frames, 88)`` grid of :class:`NoteState` values."""

    __slots__ = ("_cells",)

    def __init__(self, cells: np.ndarray | Sequence, *, validate: bool = True):
        arr = np.array(cells, dtype=np.uint8, copy=True)
        if arr.ndim != 2 or arr.shape[1] != N_PITCHES or arr.shape[0] < 1:
            raise RollError(f"roll must have shape (T>=1, {N_PITCHES}), got {arr.shape}")
        if arr.max(initial=0) >= N_STATES:
            raise RollError("roll contains values outside the 4 note states")
        arr.setflags(write=False)
        self._cells = arr
        if validate:
            self.check_sustain()

    @classmethod
    def empty(cls, n_frames: int) -> "PianoRoll":
        return cls(np.full((n_frames, N_PITCHES), OFF, dtype=np.uint8))

    @classmethod
    def from_one_hot(cls, dist: np.ndarray, *, validate: bool = True) -> "PianoRoll":
        dist = np.asarray(dist)
        if dist.ndim != 3 or dist.shape[1:] != (N_PITCHES, N_STATES):
            raise RollError(f"expected (T, {N_PITCHES}, {N_STATES}), got {dist.shape}")
        return cls(dist.argmax(axis=-1), validate=validate)

    @property
    def cells(self) -> np.ndarray:
        return self._cells

    @property
    def n_frames(self) -> int:
        return self._cells.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self._cells.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PianoRoll):
            return NotImplemented
        return self._cells.shape == other._cells.shape and bool(np.array_equal(self._cells, other._cells))

    def __hash__(self) -> int:
        return hash((self._cells.shape, self._cells.tobytes()))

    def __repr__(self) -> str:
        n_onsets = int((self._cells == ONSET).sum())
        return f"PianoRoll(frames={self.n_frames}, onsets={n_onsets})"

    def to_one_hot(self) -> np.ndarray:
        return np.eye(N_STATES, dtype=np.float64)[self._cells]

    def has_mask(self) -> bool:
        return bool((self._cells == MASK).any())

    def sustain_violations(self) -> np.ndarray:
        """Return ``(frame, pitch_index)`` pairs of SUSTAIN cells lacking a predecessor."""
        c = self._cells
        prev = np.vstack([np.full((1, N_PITCHES), OFF, dtype=np.uint8), c[:-1]])
        bad = (c == SUSTAIN) & (prev != ONSET) & (prev != SUSTAIN)
        return np.argwhere(bad)

    def check_sustain(self) -> None:
        bad = self.sustain_violations()
        if len(bad):
            t, p = bad[0]
            raise RollError(
                f"SUSTAIN without preceding onset at frame {t}, pitch {index_to_pitch(p)} "
                f"({len(bad)} violations)"
            )

    def notes(self) -> list[tuple[int, int, int]]:
        """List ``(midi_pitch, start_frame, end_frame)`` for every ONSET·SUSTAIN* run."""
        c = self._cells
        out = []
        for t, p in np.argwhere(c == ONSET):
            end = t + 1
            while end < c.shape[0] and c[end, p] == SUSTAIN:
                end += 1
            out.append((index_to_pitch(int(p)), int(t), int(end)))
        out.sort(key=lambda n: (n[1], n[0]))
        return out


def repair_sustain(cells: np.ndarray) -> np.ndarray:
    """Promote every orphan SUSTAIN to ONSET; returns a new array."""
    out = np.array(cells, dtype=np.uint8, copy=True)
    prev = np.full(out.shape[1], OFF, dtype=np.uint8)
    for t in range(out.shape[0]):
        row = out[t]
        orphan = (row == SUSTAIN) & (prev != ONSET) & (prev != SUSTAIN)
        row[orphan] = ONSET
        prev = row
    return out


def roll_from_notes(notes: Iterable[tuple[int, int, int]], n_frames: int) -> tuple[PianoRoll, int]:
    """Rasterize ``(pitch, start_frame, end_frame)`` notes; later onsets overwrite.

    Returns the roll and the number of notes dropped for lying outside 21-108
    or starting past the last frame.
    """
    cells = np.full((n_frames, N_PITCHES), OFF, dtype=np.uint8)
    dropped = 0
    for pitch, start, end in sorted(notes, key=lambda n: (n[1], n[0], n[2])):
        if not LOWEST_PITCH <= pitch <= HIGHEST_PITCH or start >= n_frames or start < 0:
            dropped += 1
            continue
        end = min(max(end, start + 1), n_frames)
        p = pitch_to_index(pitch)
        cells[start, p] = ONSET
        cells[start + 1 : end, p] = SUSTAIN
    return PianoRoll(cells), dropped


class ChordQuality(enum.IntEnum):
    MAJ = 0
    MIN = 1
    DIM = 2
    AUG = 3
    DOM7 = 4
    MAJ7 = 5
    MIN7 = 6

    @property
    def intervals(self) -> tuple[int, ...]:
        return _INTERVALS[self]

    @property
    def is_seventh(self) -> bool:
        return len(_INTERVALS[self]) == 4


_INTERVALS = {
    ChordQuality.MAJ: (0, 4, 7),
    ChordQuality.MIN: (0, 3, 7),
    ChordQuality.DIM: (0, 3, 6),
    ChordQuality.AUG: (0, 4, 8),
    ChordQuality.DOM7: (0, 4, 7, 10),
    ChordQuality.MAJ7: (0, 4, 7, 11),
    ChordQuality.MIN7: (0, 3, 7, 10),
}

_QUALITY_ALIASES = {
    "maj": ChordQuality.MAJ, "": ChordQuality.MAJ, "m": ChordQuality.MIN, "min": ChordQuality.MIN,
    "dim": ChordQuality.DIM, "aug": ChordQuality.AUG, "7": ChordQuality.DOM7, "dom7": ChordQuality.DOM7,
    "maj7": ChordQuality.MAJ7, "min7": ChordQuality.MIN7, "m7": ChordQuality.MIN7,
}


@dataclass(frozen=True, order=True)
class ChordLabel:
    root: int
    quality: ChordQuality

    def __post_init__(self):
        if not 0 <= self.root < 12:
            raise ValueError(f"chord root must be a pitch class 0-11, got {self.root}")
        object.__setattr__(self, "quality", ChordQuality(self.quality))

    @classmethod
    def parse(cls, text: str) -> "ChordLabel":
        """Parse ``"C:maj"``, ``"Bb:min7"`` or ``"F#:DOM7"``."""
        root, _, qual = text.strip().partition(":")
        key = qual.strip().lower()
        if key not in _QUALITY_ALIASES:
            raise ValueError(f"unknown chord quality {qual!r}")
        return cls(parse_pitch_class(root), _QUALITY_ALIASES[key])

    @property
    def intervals(self) -> tuple[int, ...]:
        return self.quality.intervals

    @property
    def pitch_classes(self) -> frozenset[int]:
        return frozenset((self.root + i) % 12 for i in self.intervals)

    def transposed(self, semitones: int) -> "ChordLabel":
        return ChordLabel((self.root + semitones) % 12, self.quality)

    def __str__(self) -> str:
        return f"{PITCH_NAMES[self.root]}:{self.quality.name.lower()}"


class Mode(enum.IntEnum):
    MAJOR = 0
    MINOR = 1


_SCALES = {Mode.MAJOR: (0, 2, 4, 5, 7, 9, 11), Mode.MINOR: (0, 2, 3, 5, 7, 8, 10)}


@dataclass(frozen=True)
class KeySignature:
    tonic: int
    mode: Mode = Mode.MAJOR

    def __post_init__(self):
        if not 0 <= self.tonic < 12:
            raise ValueError(f"key tonic must be a pitch class 0-11, got {self.tonic}")
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def scale(self) -> frozenset[int]:
        return frozenset((self.tonic + s) % 12 for s in _SCALES[self.mode])

    def transposed(self, semitones: int) -> "KeySignature":
        return KeySignature((self.tonic + semitones) % 12, self.mode)

    def __str__(self) -> str:
        return f"{PITCH_NAMES[self.tonic]}:{self.mode.name.lower()}"


@dataclass(frozen=True)
class ChordSpan:
    start_beat: float
    end_beat: float
    label: ChordLabel

    @property
    def start_frame(self) -> int:
        return beat_to_frame(self.start_beat)

    @property
    def end_frame(self) -> int:
        return beat_to_frame(self.end_beat)


def beat_to_frame(beat: float) -> int:
    """Round-half-up conversion of a beat position to a 16th-note frame."""
    return int(np.floor(beat * FRAMES_PER_BEAT + 0.5))


def chord_to_pitches(label: ChordLabel) -> frozenset[int]:
    """MIDI pitches of a chord voiced from its root in the C4 octave, two octaves down."""
    root = 60 + label.root - CHORD_SHIFT
    return frozenset(root + i for i in label.intervals)


@dataclass(frozen=True)
class LeadSheet:
    roll: PianoRoll
    key: KeySignature
    chords: tuple[ChordSpan, ...] = field(default_factory=tuple)

    @property
    def n_frames(self) -> int:
        return self.roll.n_frames


class LeadSheetError(ValueError):
    pass


def build_lead_sheet(
    melody_roll: PianoRoll, chords: Sequence[ChordSpan], key: KeySignature
) -> LeadSheet:
    """Write chord tones below the melody into a single roll channel.

    Each span re-triggers its chord tones with an ONSET at the span start,
    even if the previous span carried the same chord. A chord tone landing on
    a melody cell raises :class:`LeadSheetError`.
    """
    cells = np.array(melody_roll.cells, copy=True)
    n_frames = melody_roll.n_frames
    covered = np.zeros(n_frames, dtype=bool)
    spans = sorted(chords, key=lambda s: s.start_beat)
    for prev, nxt in zip(spans, spans[1:]):
        if nxt.start_frame < prev.end_frame:
            raise LeadSheetError(f"chord spans overlap at beat {nxt.start_beat}")
    for span in spans:
        start, end = span.start_frame, min(span.end_frame, n_frames)
        if start >= end:
            continue
        for pitch in sorted(chord_to_pitches(span.label)):
            p = pitch_to_index(pitch)
            if (melody_roll.cells[start:end, p] != OFF).any():
                t = start + int(np.argmax(melody_roll.cells[start:end, p] != OFF))
                raise LeadSheetError(
                    f"chord tone {pitch} of {span.label} collides with melody at frame {t}"
                )
            cells[start, p] = ONSET
            cells[start + 1 : end, p] = SUSTAIN
        covered[start:end] = True
    if spans and not covered.all():
        n_missing = int((~covered).sum())
        warnings.warn(f"{n_missing} frames not covered by any chord span", stacklevel=2)
    return LeadSheet(PianoRoll(cells), key, tuple(spans))


def transpose(roll: PianoRoll, semitones: int) -> tuple[PianoRoll, int]:
    """Shift every note by ``semitones``; notes pushed off the keyboard are dropped.

    Returns the transposed roll and the number of dropped notes.
    """
    if semitones == 0:
        return roll, 0
    cells = roll.cells
    out = np.full_like(cells, OFF)
    if semitones > 0:
        out[:, semitones:] = cells[:, : N_PITCHES - semitones]
        lost = cells[:, N_PITCHES - semitones :]
    else:
        out[:, :semitones] = cells[:, -semitones:]
        lost = cells[:, :-semitones]
    return PianoRoll(out), int((lost == ONSET).sum())


def transpose_lead_sheet(sheet: LeadSheet, semitones: int) -> tuple[LeadSheet, int]:
    roll, dropped = transpose(sheet.roll, semitones)
    chords = tuple(ChordSpan(c.start_beat, c.end_beat, c.label.transposed(semitones)) for c in sheet.chords)
    return LeadSheet(roll, sheet.key.transposed(semitones), chords), dropped


def crop_frames(roll: PianoRoll, start: int, length: int) -> PianoRoll:
    if start < 0 or length < 1 or start + length > roll.n_frames:
        raise RollError(f"crop [{start}, {start + length}) outside roll of {roll.n_frames} frames")
    cells = np.array(roll.cells[start : start + length], copy=True)
    head = cells[0]
    head[head == SUSTAIN] = ONSET
    return PianoRoll(cells)


def crop_bars(roll: PianoRoll, start_bar: int, n_bars: int = 8) -> PianoRoll:
    """Cut ``n_bars`` bars of 4/4 starting at ``start_bar``; cut notes restart with an ONSET."""
    return crop_frames(roll, start_bar * FRAMES_PER_BAR, n_bars * FRAMES_PER_BAR)


def crop_chords(chords: Sequence[ChordSpan], start_beat: float, n_beats: float) -> tuple[ChordSpan, ...]:
    """Clip chord spans to a window and re-base them to the window start."""
    end_beat = start_beat + n_beats
    out = []
    for c in chords:
        s, e = max(c.start_beat, start_beat), min(c.end_beat, end_beat)
        if e > s:
            out.append(ChordSpan(s - start_beat, e - start_beat, c.label))
    return tuple(out)


def crop_lead_sheet(sheet: LeadSheet, start_bar: int, n_bars: int = 8) -> LeadSheet:
    roll = crop_bars(sheet.roll, start_bar, n_bars)
    chords = crop_chords(sheet.chords, start_bar * 4, n_bars * 4)
    return LeadSheet(roll, sheet.key, chords)


def chords_per_beat(chords: Sequence[ChordSpan], n_beats: int) -> list[ChordLabel | None]:
    """Expand spans to one label per beat (``None`` where no span covers the beat start)."""
    out: list[ChordLabel | None] = [None] * n_beats
    for c in chords:
        for b in range(n_beats):
            if c.start_frame <= b * FRAMES_PER_BEAT < c.end_frame:
                out[b] = c.label
    return out
