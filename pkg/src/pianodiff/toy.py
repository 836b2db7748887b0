"""Small synthetic corpora for smoke tests and overfit runs.

Every pair is diatonic in C major. The melody is one chord tone per beat;
the accompaniment plays the lead sheet's own chord-tone pitches, the root on
beats 1 and 3 and the upper tones on beats 2 and 4, so it is a fixed
function of the chord track that lines up pitch for pitch.
"""
from __future__ import annotations

import numpy as np

from .roll import (
    FRAMES_PER_BAR,
    ChordLabel,
    ChordQuality,
    ChordSpan,
    KeySignature,
    LeadSheet,
    PianoRoll,
    build_lead_sheet,
    chord_to_pitches,
    roll_from_notes,
)

C_MAJOR = KeySignature(0)
DIATONIC_TRIADS = (
    ChordLabel(0, ChordQuality.MAJ),
    ChordLabel(2, ChordQuality.MIN),
    ChordLabel(4, ChordQuality.MIN),
    ChordLabel(5, ChordQuality.MAJ),
    ChordLabel(7, ChordQuality.MAJ),
    ChordLabel(9, ChordQuality.MIN),
)


def accompany(chords: list[ChordLabel]) -> list[tuple[int, int, int]]:
    notes = []
    for bar, label in enumerate(chords):
        t = bar * FRAMES_PER_BAR
        bass, *upper = sorted(chord_to_pitches(label))
        notes += [(bass, t, t + 4), (bass, t + 8, t + 12)]
        for p in upper:
            notes += [(p, t + 4, t + 7), (p, t + 12, t + 15)]
    return notes


def toy_pair(chords: list[ChordLabel], rng: np.random.Generator) -> tuple[LeadSheet, PianoRoll]:
    n_frames = len(chords) * FRAMES_PER_BAR
    melody = []
    for bar, label in enumerate(chords):
        tones = sorted(72 + (label.root + i) % 12 for i in label.intervals)
        for beat in range(4):
            start = bar * FRAMES_PER_BAR + 4 * beat
            melody.append((int(rng.choice(tones)), start, start + 4))
    mel, _ = roll_from_notes(melody, n_frames)
    spans = tuple(ChordSpan(4 * b, 4 * b + 4, lb) for b, lb in enumerate(chords))
    sheet = build_lead_sheet(mel, spans, C_MAJOR)
    acc, _ = roll_from_notes(accompany(chords), n_frames)
    return sheet, acc


def toy_corpus(n_pairs: int = 4, n_bars: int = 8, seed: int = 0) -> list[tuple[LeadSheet, PianoRoll]]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_pairs):
        chords = [DIATONIC_TRIADS[i] for i in rng.integers(0, len(DIATONIC_TRIADS), n_bars)]
        out.append(toy_pair(chords, rng))
    return out
