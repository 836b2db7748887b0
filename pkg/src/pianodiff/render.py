"""Grayscale PGM rendering of piano rolls."""
from __future__ import annotations

import numpy as np

from .roll import PianoRoll, RollError

# indexed by state; MASK has no colour and is rejected
LEVELS = np.array([0, 128, 255], dtype=np.uint8)


def roll_image(roll: PianoRoll) -> np.ndarray:
    """``(88, T)`` image: row 0 is MIDI 108, columns are frames."""
    if roll.has_mask():
        raise RollError("cannot render a roll containing MASK cells")
    return LEVELS[roll.cells.T[::-1]]


def to_pgm(roll: PianoRoll) -> bytes:
    img = roll_image(roll)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError("expected an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def pgm_to_roll(data: bytes) -> PianoRoll:
    img = read_pgm(data)
    states = np.full(img.shape, 255, dtype=np.uint8)
    for s, level in enumerate(LEVELS):
        states[img == level] = s
    if (states == 255).any():
        raise ValueError("image contains levels other than 0, 128, 255")
    return PianoRoll(states[::-1].T.copy())

