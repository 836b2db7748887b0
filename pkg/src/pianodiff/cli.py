"""Command-line entry point: ingest, train, generate, eval, render."""
from __future__ import annotations

import argparse
import dataclasses
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import container
from .checkpoint import CheckpointError, load_checkpoint
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import DiffusionConfig, generate_cells
from .metrics import MetricReport, score_segment
from .midi import MeterError, MidiError, read_midi, roll_to_midi
from .render import to_pgm
from .roll import (
    FRAMES_PER_BAR,
    LeadSheetError,
    NoteState,
    PianoRoll,
    RollError,
    build_lead_sheet,
    crop_bars,
    crop_frames,
    crop_lead_sheet,
)
from .trainer import LOG_HEADER, TrainConfig, fit, init_state, save_training, validate

WINDOW_BARS = 8


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


CONFIG_SECTIONS = (DiffusionConfig, DenoiserConfig, TrainConfig)
PATH_KEYS = ("data", "out_dir")
EXTRA_KEYS = {"val_fraction": 0.0}


def _convert(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        inner = type(default[0]) if default else float
        return tuple(inner(x) for x in raw.replace(",", " ").split())
    if isinstance(default, int) or default is None:
        return None if raw.lower() == "none" else int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


@dataclasses.dataclass
class RunConfig:
    diffusion: DiffusionConfig
    denoiser: DenoiserConfig
    train: TrainConfig
    val_fraction: float = 0.0
    data: str | None = None
    out_dir: str | None = None

    def lines(self) -> list[str]:
        seen, out = set(), []
        for section in (self.diffusion, self.denoiser, self.train):
            for name in _fields(type(section)):
                if name in seen:
                    continue
                seen.add(name)
                value = getattr(section, name)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                out.append(f"{name} = {value}")
        out.append(f"val_fraction = {self.val_fraction}")
        return out


def parse_config(text: str) -> RunConfig:
    """Flat ``key = value`` lines; keys shared by several sections set all of them."""
    values: dict[str, str] = {}
    known = set(EXTRA_KEYS) | set(PATH_KEYS)
    for cls in CONFIG_SECTIONS:
        known |= set(_fields(cls))
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise CliError(f"config line {lineno}: expected key = value")
        if key not in known:
            raise CliError(f"config line {lineno}: unknown key {key!r}")
        values[key] = raw.strip()
    sections = []
    for cls in CONFIG_SECTIONS:
        kwargs = {}
        defaults = cls()
        for name in _fields(cls):
            if name in values:
                try:
                    kwargs[name] = _convert(values[name], getattr(defaults, name))
                except ValueError as e:
                    raise CliError(f"config key {name!r}: {e}") from None
        try:
            sections.append(cls(**kwargs))
        except (TypeError, ValueError) as e:
            raise CliError(f"config rejected: {e}") from None
    diffusion, denoiser, train = sections
    if denoiser.steps != diffusion.steps:
        raise CliError("config rejected: denoiser and diffusion step counts differ")
    run = RunConfig(diffusion, denoiser, train, float(values.get("val_fraction", 0.0)))
    run.data, run.out_dir = values.get("data"), values.get("out_dir")
    return run


# ---------------------------------------------------------------- helpers


def _track_list(spec: str | None):
    if spec is None:
        return None
    return [int(t) if t.strip().isdigit() else t.strip() for t in spec.split(",") if t.strip()]


def _read_bytes(path: str | Path, what: str) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}", 2)
    return p.read_bytes()


def _chords_path(template: str, midi_path: Path) -> Path:
    p = Path(template.format(stem=midi_path.stem, name=midi_path.name))
    return p if p.is_absolute() else midi_path.parent / p


def _pad(roll: PianoRoll, n_frames: int) -> PianoRoll:
    cells = np.full((n_frames, roll.cells.shape[1]), NoteState.OFF, dtype=np.uint8)
    cells[: roll.n_frames] = roll.cells[:n_frames]
    return PianoRoll(cells)


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    midi_dir = Path(args.midi_dir)
    if not midi_dir.is_dir():
        raise CliError(f"midi directory not found: {midi_dir}", 2)
    files = sorted(p for p in midi_dir.iterdir() if p.suffix.lower() in (".mid", ".midi"))
    melody, acc = _track_list(args.melody_track), _track_list(args.acc_tracks)
    items, skipped_meter, skipped_other = [], 0, 0
    for path in files:
        chords_file = _chords_path(args.chords_file, path)
        if not chords_file.is_file():
            raise CliError(f"missing chord annotation for {path.name}: {chords_file}")
        key, spans = container.parse_chords_csv(chords_file.read_text())
        data = path.read_bytes()
        try:
            mel, accomp = read_midi(data, tracks=melody), read_midi(data, tracks=acc)
            n_frames = max(mel.n_frames, accomp.n_frames)
            sheet = build_lead_sheet(_pad(mel.roll, n_frames), spans, key)
            acc_roll = _pad(accomp.roll, n_frames)
        except MeterError as e:
            skipped_meter += 1
            print(f"song={path.stem} skipped=meter reason={e}")
            continue
        except (MidiError, LeadSheetError, RollError) as e:
            skipped_other += 1
            print(f"song={path.stem} skipped=invalid reason={e}")
            continue
        seg = args.segment_bars
        if seg:
            n_seg = n_frames // (seg * FRAMES_PER_BAR)
            for k in range(n_seg):
                items.append(
                    container.DatasetItem(
                        f"{path.stem}_{k:03d}", crop_lead_sheet(sheet, k * seg, seg), crop_bars(acc_roll, k * seg, seg)
                    )
                )
        else:
            n_seg = 1
            items.append(container.DatasetItem(path.stem, sheet, acc_roll))
        print(
            f"song={path.stem} frames={n_frames} dropped_melody={mel.dropped} "
            f"dropped_accompaniment={accomp.dropped} segments={n_seg}"
        )
    if not items:
        raise CliError(f"no usable songs in {midi_dir}")
    container.save(args.out, items)
    print(f"songs={len(files)} skipped_meter={skipped_meter} skipped_invalid={skipped_other} items={len(items)}")
    return 0


def _split(items, frac: float):
    n_val = int(math.floor(frac * len(items)))
    if n_val <= 0 or n_val >= len(items):
        return items, items
    return items[: len(items) - n_val], items[len(items) - n_val :]


def cmd_train(args) -> int:
    run = parse_config(_read_bytes(args.config, "config file").decode("utf-8"))
    data = args.data or run.data
    out_dir = args.out_dir or run.out_dir
    if data is None or not Path(data).is_file():
        raise CliError(f"data container not found: {data}", 2)
    if out_dir is None:
        raise CliError("no output directory given", 2)
    items = container.load(data)
    train_items, val_items = _split([it.pair() for it in items], run.val_fraction)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(run.train.seed)
    model = Denoiser(run.denoiser)
    log_path = out / "train.log"
    with open(log_path, "w") as log:
        def emit(line: str) -> None:
            log.write(line + "\n")
            log.flush()
            print(line)

        for line in run.lines():
            emit(f"# {line}")
        emit(LOG_HEADER)
        state = fit(model, train_items, val_items, run.train, run.diffusion, init_state(model, run.train), emit, out)
        schedule = run.diffusion.schedule()
        val_loss, val_f1 = validate(model, val_items, schedule, run.train.seed, run.train)
        best = min(state.best_val, val_loss)
        emit(f"# final best_val_loss={best:.6f} val_f1={val_f1:.6f}")
    save_training(out / "final.ckpt", model, state)
    return 0


def cmd_generate(args) -> int:
    try:
        model, _, _ = load_checkpoint(_read_bytes(args.checkpoint, "checkpoint"))
    except CheckpointError as e:
        raise CliError(f"bad checkpoint: {e}") from None
    if args.config:
        run = parse_config(_read_bytes(args.config, "config file").decode("utf-8"))
        if run.denoiser != model.cfg:
            raise CliError("checkpoint/config mismatch: denoiser settings differ")
        diffusion = run.diffusion
    else:
        diffusion = DiffusionConfig(steps=model.cfg.steps)
    if diffusion.steps != model.cfg.steps:
        raise CliError("checkpoint/config mismatch: step counts differ")
    key, spans = container.parse_chords_csv(_read_bytes(args.chords_file, "chords file").decode("utf-8"))
    try:
        mel = read_midi(_read_bytes(args.lead_sheet_midi, "lead sheet"), tracks=_track_list(args.melody_track))
        sheet = build_lead_sheet(mel.roll, spans, key)
    except (MidiError, LeadSheetError, RollError) as e:
        raise CliError(f"invalid lead sheet: {e}") from None
    win = WINDOW_BARS * FRAMES_PER_BAR
    n_frames = sheet.n_frames
    n_win = max(1, -(-n_frames // win))
    x = _pad(sheet.roll, n_win * win).cells.reshape(n_win, win, -1)
    schedule = diffusion.schedule()
    rng = np.random.default_rng(args.seed)
    model.eval()
    start = time.perf_counter()
    pieces = [generate_cells(x[i : i + 1], model, schedule, args.as_sampling, rng)[0] for i in range(n_win)]
    wall = time.perf_counter() - start
    roll = crop_frames(PianoRoll(np.concatenate(pieces)), 0, n_frames)
    Path(args.out_midi).write_bytes(roll_to_midi(roll, mel.tempo_bpm))
    print(f"windows={n_win} wall_time_s={wall:.3f} per_window_s={wall / n_win:.3f}")
    return 0


def cmd_eval(args) -> int:
    gen_dir = Path(args.generated_dir)
    if not gen_dir.is_dir():
        raise CliError(f"generated directory not found: {gen_dir}", 2)
    files = sorted(p for p in gen_dir.iterdir() if p.suffix.lower() in (".mid", ".midi"))
    if not files:
        raise CliError(f"no generated MIDI files in {gen_dir}")
    refs = {it.name: it for it in container.loads(_read_bytes(args.reference_container, "reference container"))}
    report = MetricReport()
    for path in files:
        ref = refs.get(path.stem)
        if ref is None:
            raise CliError(f"no reference segment named {path.stem!r}")
        try:
            gen = read_midi(path.read_bytes(), ref.n_frames).roll
        except MidiError as e:
            raise CliError(f"{path.name}: {e}") from None
        report.segments.append(score_segment(path.stem, gen, ref.sheet.key, ref.sheet.chords))
    prefix = Path(args.report)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.txt").write_text(report.to_text())
    Path(f"{prefix}.csv").write_text(report.to_csv())
    sys.stdout.write(report.to_text())
    return 0


def _container_item(spec: str, part: str) -> PianoRoll:
    path, _, sel = spec.rpartition(":")
    if not path:
        path, sel = sel, "0"
    items = container.loads(_read_bytes(path, "container"))
    if sel.isdigit():
        idx = int(sel)
        if idx >= len(items):
            raise CliError(f"container has {len(items)} items, index {idx} out of range")
        item = items[idx]
    else:
        by_name = {it.name: it for it in items}
        if sel not in by_name:
            raise CliError(f"no container item named {sel!r}")
        item = by_name[sel]
    return item.sheet.roll if part == "lead" else item.accompaniment


def cmd_render(args) -> int:
    if args.midi:
        try:
            roll = read_midi(_read_bytes(args.midi, "MIDI file")).roll
        except MidiError as e:
            raise CliError(f"invalid MIDI: {e}") from None
    else:
        roll = _container_item(args.container_item, args.part)
    try:
        data = to_pgm(roll)
    except RollError as e:
        raise CliError(f"invalid roll: {e}") from None
    Path(args.out_pgm).write_bytes(data)
    return 0


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pianodiff", description="Discrete-diffusion piano accompaniment from lead sheets.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="build a dataset container from MIDI files and chord sidecars")
    p.add_argument("--midi-dir", required=True)
    p.add_argument("--melody-track", required=True, help="track index or name")
    p.add_argument("--acc-tracks", required=True, help="comma-separated track indices or names")
    p.add_argument("--chords-file", default="{stem}.chords.csv", help="sidecar path template")
    p.add_argument("--segment-bars", type=int, default=WINDOW_BARS, help="0 keeps whole songs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a denoiser")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate an accompaniment MIDI for a lead sheet")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lead-sheet-midi", required=True)
    p.add_argument("--chords-file", required=True)
    p.add_argument("--melody-track", help="track index or name; default merges all tracks")
    p.add_argument("--out-midi", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--as-sampling", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--config", help="optional run config to check against the checkpoint")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score generated segments against references")
    p.add_argument("--generated-dir", required=True)
    p.add_argument("--reference-container", required=True)
    p.add_argument("--report", required=True, help="output prefix; writes .txt and .csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a roll as a PGM image")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--midi")
    src.add_argument("--container-item", help="PATH[:INDEX|:NAME]")
    p.add_argument("--part", choices=("accompaniment", "lead"), default="accompaniment")
    p.add_argument("--out-pgm", required=True)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        sys.stderr.write(f"error: {e}\n")
        return e.code
    except (container.ContainerError, OSError) as e:
        sys.stderr.write(f"error: {' '.join(str(e).split())}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
