"""Dataset container and chord/key sidecar files.

Container layout (little-endian)::

    8 bytes  magic b"PNDDATA\\0"
    u32      version (1)
    u32      item count
    per item:
      u16 + bytes   UTF-8 name
      u32           frame count T
      T*88 u8       lead-sheet states, row-major (frame, pitch)
      T*88 u8       accompaniment states
      u8, u8        key tonic pitch class, mode (0 major, 1 minor)
      u32           chord span count
      per span: f64 start_beat, f64 end_beat, u8 root, u8 quality

Sidecar CSV: one ``key,<tonic>,<major|minor>`` line, then rows of
``start_beat,end_beat,root,quality``. Blank lines, ``#`` comments and a
``start_beat,...`` header row are ignored.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .roll import (
    N_PITCHES,
    PITCH_NAMES,
    ChordLabel,
    ChordQuality,
    ChordSpan,
    KeySignature,
    LeadSheet,
    Mode,
    PianoRoll,
    parse_pitch_class,
)

MAGIC = b"PNDDATA\x00"
VERSION = 1


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetItem:
    name: str
    sheet: LeadSheet
    accompaniment: PianoRoll

    @property
    def n_frames(self) -> int:
        return self.accompaniment.n_frames

    def pair(self) -> tuple[LeadSheet, PianoRoll]:
        return self.sheet, self.accompaniment


def _pack_item(item: DatasetItem) -> bytes:
    if item.sheet.n_frames != item.accompaniment.n_frames:
        raise ContainerError(f"{item.name}: lead sheet and accompaniment lengths differ")
    name = item.name.encode("utf-8")
    parts = [struct.pack("<H", len(name)), name, struct.pack("<I", item.n_frames)]
    parts += [item.sheet.roll.cells.tobytes(), item.accompaniment.cells.tobytes()]
    parts.append(struct.pack("<BBI", item.sheet.key.tonic, int(item.sheet.key.mode), len(item.sheet.chords)))
    for c in item.sheet.chords:
        parts.append(struct.pack("<ddBB", c.start_beat, c.end_beat, c.label.root, int(c.label.quality)))
    return b"".join(parts)


def dumps(items: Sequence[DatasetItem]) -> bytes:
    return MAGIC + struct.pack("<II", VERSION, len(items)) + b"".join(_pack_item(it) for it in items)


def save(path: str | Path, items: Sequence[DatasetItem]) -> None:
    Path(path).write_bytes(dumps(items))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError("truncated container")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> list[DatasetItem]:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise ContainerError("bad magic: not a dataset container")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    items = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (t,) = r.unpack("<I")
        lead = np.frombuffer(r.take(t * N_PITCHES), dtype=np.uint8).reshape(t, N_PITCHES)
        acc = np.frombuffer(r.take(t * N_PITCHES), dtype=np.uint8).reshape(t, N_PITCHES)
        tonic, mode, n_chords = r.unpack("<BBI")
        chords = []
        for _ in range(n_chords):
            s, e, root, q = r.unpack("<ddBB")
            chords.append(ChordSpan(s, e, ChordLabel(root, ChordQuality(q))))
        sheet = LeadSheet(PianoRoll(lead), KeySignature(tonic, Mode(mode)), tuple(chords))
        items.append(DatasetItem(name, sheet, PianoRoll(acc)))
    if r.pos != len(data):
        raise ContainerError(f"{len(data) - r.pos} trailing bytes after {count} items")
    return items


def load(path: str | Path) -> list[DatasetItem]:
    return loads(Path(path).read_bytes())


_MODES = {"major": Mode.MAJOR, "maj": Mode.MAJOR, "minor": Mode.MINOR, "min": Mode.MINOR}


def parse_chords_csv(text: str) -> tuple[KeySignature, tuple[ChordSpan, ...]]:
    key = None
    spans = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        row = [c.strip() for c in row]
        if not row or not row[0] or row[0].startswith("#") or row[0] == "start_beat":
            continue
        try:
            if row[0].lower() == "key":
                if key is not None:
                    raise ValueError("duplicate key line")
                key = KeySignature(parse_pitch_class(row[1]), _MODES[row[2].lower()])
                continue
            start, end = float(row[0]), float(row[1])
            label = ChordLabel.parse(f"{row[2]}:{row[3]}")
        except (IndexError, KeyError, ValueError) as e:
            raise ContainerError(f"chords file line {lineno}: {e}") from None
        if end <= start:
            raise ContainerError(f"chords file line {lineno}: empty span")
        spans.append(ChordSpan(start, end, label))
    if key is None:
        raise ContainerError("chords file has no key line")
    return key, tuple(spans)


def format_chords_csv(key: KeySignature, chords: Sequence[ChordSpan]) -> str:
    lines = [f"key,{PITCH_NAMES[key.tonic]},{key.mode.name.lower()}", "start_beat,end_beat,root,quality"]
    for c in chords:
        lines.append(f"{c.start_beat:g},{c.end_beat:g},{PITCH_NAMES[c.label.root]},{c.label.quality.name.lower()}")
    return "\n".join(lines) + "\n"
