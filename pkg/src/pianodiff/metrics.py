"""Objective metrics for generated accompaniments.

All functions read the accompaniment roll only. Sounding cells are ONSET
or SUSTAIN; each sounding frame carries weight 1.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .roll import (
    FRAMES_PER_BAR,
    FRAMES_PER_BEAT,
    LOWEST_PITCH,
    ChordLabel,
    ChordQuality,
    ChordSpan,
    KeySignature,
    NoteState,
    PianoRoll,
    chords_per_beat,
)

_PC = (np.arange(88) + LOWEST_PITCH) % 12
WINDOW_FRAMES = 2 * FRAMES_PER_BAR
ALL_LABELS = tuple(ChordLabel(r, q) for q in ChordQuality for r in range(12))


def _cells(roll: PianoRoll | np.ndarray) -> np.ndarray:
    cells = roll.cells if isinstance(roll, PianoRoll) else np.asarray(roll)
    if (cells == NoteState.MASK).any():
        raise ValueError("metrics need a MASK-free roll")
    return cells


def _sounding(cells: np.ndarray) -> np.ndarray:
    return (cells == NoteState.ONSET) | (cells == NoteState.SUSTAIN)


def chroma(cells: np.ndarray) -> np.ndarray:
    """Duration-weighted 12-bin pitch-class histogram of a block of frames."""
    per_pitch = _sounding(cells).sum(0)
    return np.bincount(_PC, weights=per_pitch, minlength=12)


def ook(roll: PianoRoll, key: KeySignature) -> float:
    """Fraction of onset cells whose pitch class lies outside ``key``'s scale."""
    onsets = _cells(roll) == NoteState.ONSET
    per_pc = np.bincount(_PC, weights=onsets.sum(0), minlength=12)
    total = per_pc.sum()
    if total == 0:
        return 0.0
    outside = sum(per_pc[pc] for pc in range(12) if pc not in key.scale)
    return float(outside / total)


@dataclass(frozen=True)
class ChordObservation:
    beat: int
    histogram: np.ndarray
    label: ChordLabel | None
    score: float


def _template_scores(hist: np.ndarray) -> dict[ChordLabel, int]:
    # (in - 0.5 out) / total ranks like 2*in - out; integers avoid float ties
    total = int(hist.sum())
    scores = {}
    for label in ALL_LABELS:
        inside = int(sum(hist[pc] for pc in label.pitch_classes))
        scores[label] = 2 * inside - (total - inside)
    return scores


def _best_label(hist: np.ndarray, bass_pc: int) -> tuple[ChordLabel, float]:
    scores = _template_scores(hist)
    best = min(
        ALL_LABELS,
        key=lambda lb: (-scores[lb], lb.quality.is_seventh, (lb.root - bass_pc) % 12, int(lb.quality), lb.root),
    )
    return best, scores[best] / (2 * hist.sum())


def observe_chords(roll: PianoRoll) -> list[ChordObservation]:
    cells = _cells(roll)
    n_beats = cells.shape[0] // FRAMES_PER_BEAT
    out = []
    prev: ChordLabel | None = None
    for b in range(n_beats):
        block = cells[b * FRAMES_PER_BEAT : (b + 1) * FRAMES_PER_BEAT]
        hist = chroma(block)
        if hist.sum() == 0:
            out.append(ChordObservation(b, hist, prev, 0.0))
            continue
        bass_pc = int(_PC[np.flatnonzero(_sounding(block).any(0))[0]])
        prev, score = _best_label(hist, bass_pc)
        out.append(ChordObservation(b, hist, prev, score))
    return out


def extract_chords(roll: PianoRoll) -> list[ChordLabel | None]:
    """Rule-based per-beat chord labels; ``None`` stands for N.C.

    Each beat's histogram is scored against every template as
    (chord-tone mass - 0.5 * other mass) / total mass. Ties go to triads
    over sevenths, then to the root closest above the beat's lowest
    sounding pitch class. An empty beat repeats the previous label.
    """
    return [o.label for o in observe_chords(roll)]


def chord_accuracy(extracted: Sequence[ChordLabel | None], reference: Sequence[ChordLabel | None]) -> float:
    if len(extracted) != len(reference):
        raise ValueError(f"label lists differ in length: {len(extracted)} vs {len(reference)}")
    if not extracted:
        return 0.0
    hits = sum(a is not None and b is not None and a == b for a, b in zip(extracted, reference))
    return hits / len(extracted)


def reference_chroma(chords: Sequence[ChordSpan], start: int, stop: int) -> np.ndarray:
    """Chord-tone indicator weighted by how many frames of ``[start, stop)`` each span covers."""
    out = np.zeros(12)
    for c in chords:
        overlap = min(c.end_frame, stop) - max(c.start_frame, start)
        if overlap > 0:
            for pc in c.label.pitch_classes:
                out[pc] += overlap
    return out


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def chord_similarity(roll: PianoRoll, reference_chords: Sequence[ChordSpan]) -> float:
    """Mean cosine between roll chroma and reference chord chroma over 2-bar windows."""
    cells = _cells(roll)
    if cells.shape[0] % WINDOW_FRAMES:
        raise ValueError(f"roll length {cells.shape[0]} is not a multiple of {WINDOW_FRAMES} frames")
    sims = [
        _cosine(chroma(cells[s : s + WINDOW_FRAMES]), reference_chroma(reference_chords, s, s + WINDOW_FRAMES))
        for s in range(0, cells.shape[0], WINDOW_FRAMES)
    ]
    return float(np.mean(sims))


def bar_onset_patterns(roll: PianoRoll) -> np.ndarray:
    cells = _cells(roll)
    if cells.shape[0] % FRAMES_PER_BAR:
        raise ValueError(f"roll length {cells.shape[0]} is not a multiple of {FRAMES_PER_BAR} frames")
    onset_any = (cells == NoteState.ONSET).any(1)
    return onset_any.reshape(-1, FRAMES_PER_BAR)


def grooving_similarity(roll: PianoRoll) -> float:
    """Mean over bar pairs of ``1 - hamming / 16`` between per-bar onset vectors."""
    bars = bar_onset_patterns(roll)
    if len(bars) < 2:
        raise ValueError("grooving similarity needs at least 2 bars")
    sims = [1 - np.count_nonzero(a != b) / FRAMES_PER_BAR for a, b in itertools.combinations(bars, 2)]
    return float(np.mean(sims))


def onset_prf(generated, reference) -> tuple[float, float, float]:
    """Precision, recall and F1 of onset cells matched exactly in (time, pitch)."""
    gen = np.asarray(generated.cells if isinstance(generated, PianoRoll) else generated) == NoteState.ONSET
    ref = np.asarray(reference.cells if isinstance(reference, PianoRoll) else reference) == NoteState.ONSET
    if gen.shape != ref.shape:
        raise ValueError(f"shape mismatch {gen.shape} vs {ref.shape}")
    tp = int(np.count_nonzero(gen & ref))
    n_gen, n_ref = int(gen.sum()), int(ref.sum())
    if n_gen == 0 and n_ref == 0:
        return 1.0, 1.0, 1.0
    p = tp / n_gen if n_gen else 0.0
    r = tp / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass(frozen=True)
class SegmentScore:
    segment_id: str
    ook: float
    ca: float
    cs: float
    gs: float


@dataclass
class MetricReport:
    segments: list[SegmentScore] = field(default_factory=list)

    def _mean(self, name: str) -> float:
        if not self.segments:
            return float("nan")
        return float(np.mean([getattr(s, name) for s in self.segments]))

    @property
    def ook(self) -> float:
        return self._mean("ook")

    @property
    def ca(self) -> float:
        return self._mean("ca")

    @property
    def cs(self) -> float:
        return self._mean("cs")

    @property
    def gs(self) -> float:
        return self._mean("gs")

    def to_text(self) -> str:
        lines = [f"segments={len(self.segments)}"]
        lines += [f"{k}={getattr(self, k):.6f}" for k in ("ook", "ca", "cs", "gs")]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["segment_id", "ook", "ca", "cs", "gs"])
        for s in self.segments:
            w.writerow([s.segment_id] + [f"{getattr(s, k):.6f}" for k in ("ook", "ca", "cs", "gs")])
        return buf.getvalue()


def score_segment(
    segment_id: str, generated: PianoRoll, key: KeySignature, chords: Sequence[ChordSpan]
) -> SegmentScore:
    ref = chords_per_beat(chords, generated.n_frames // FRAMES_PER_BEAT)
    return SegmentScore(
        segment_id,
        ook(generated, key),
        chord_accuracy(extract_chords(generated), ref),
        chord_similarity(generated, chords),
        grooving_similarity(generated),
    )
