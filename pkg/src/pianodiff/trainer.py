"""Desk-scale training loop: augmentation, AdamW updates, plateau LR decay, validation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import Denoiser
from .diffusion import DiffusionConfig, NoiseSchedule, ScheduleTensors, generate_cells, vlb_loss
from .metrics import onset_prf
from .roll import FRAMES_PER_BAR, LeadSheet, PianoRoll, crop_bars, transpose

log = logging.getLogger(__name__)

Pair = tuple[LeadSheet, PianoRoll]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    max_steps: int = 5000
    betas: tuple[float, float] = (0.9, 0.96)
    lr: float = 1.0e-3
    lr_decay: float = 0.8
    patience: int = 500
    weight_decay: float = 0.01
    aux_weight: float = 5.0e-4
    seed: int = 0
    augment: bool = True
    transpose_min: int = -5
    transpose_max: int = 6
    crop_bars: int = 8
    val_every: int = 250
    val_items: int = 8
    val_as_sampling: bool = True
    log_every: int = 1
    checkpoint_every: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.lr_decay < 1:
            raise ValueError("lr_decay must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.transpose_min > self.transpose_max:
            raise ValueError("transpose_min must not exceed transpose_max")


@dataclass
class TrainState:
    step: int
    lr: float
    best_val: float
    mark: int
    rng: np.random.Generator
    optimizer: torch.optim.Optimizer
    history: list = field(default_factory=list)


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y0: np.ndarray
    indices: np.ndarray
    offsets: np.ndarray
    shifts: np.ndarray


def make_optimizer(model: Denoiser, cfg: TrainConfig, lr: float | None = None) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr if lr is None else lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )


def init_state(model: Denoiser, cfg: TrainConfig) -> TrainState:
    return TrainState(0, cfg.lr, math.inf, 0, np.random.default_rng(cfg.seed), make_optimizer(model, cfg))


def make_batch(corpus: Sequence[Pair], cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Draw items without replacement (cycling if the batch outgrows the corpus), crop, transpose."""
    n_frames = cfg.crop_bars * FRAMES_PER_BAR
    for i, (sheet, acc) in enumerate(corpus):
        if sheet.n_frames < n_frames or acc.n_frames < n_frames:
            raise ValueError(f"corpus item {i} is shorter than {cfg.crop_bars} bars")
    n = len(corpus)
    reps = -(-cfg.batch_size // n)
    indices = np.concatenate([rng.permutation(n) for _ in range(reps)])[: cfg.batch_size]
    xs, ys, offsets, shifts = [], [], [], []
    for i in indices:
        sheet, acc = corpus[i]
        n_bars = min(sheet.n_frames, acc.n_frames) // FRAMES_PER_BAR
        bar = int(rng.integers(0, n_bars - cfg.crop_bars + 1))
        k = int(rng.integers(cfg.transpose_min, cfg.transpose_max + 1)) if cfg.augment else 0
        x, _ = transpose(crop_bars(sheet.roll, bar, cfg.crop_bars), k)
        y, _ = transpose(crop_bars(acc, bar, cfg.crop_bars), k)
        xs.append(x.cells)
        ys.append(y.cells)
        offsets.append(bar)
        shifts.append(k)
    return Batch(np.stack(xs), np.stack(ys), indices, np.array(offsets), np.array(shifts))


@dataclass(frozen=True)
class StepResult:
    step: int
    loss: float
    aux: float
    total: float
    lr: float


def train_step(
    state: TrainState,
    batch: Batch,
    model: Denoiser,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    mats: ScheduleTensors | None = None,
) -> StepResult:
    model.train()
    for group in state.optimizer.param_groups:
        group["lr"] = state.lr
    tau = state.rng.integers(1, schedule.steps + 1, size=len(batch.indices))
    loss, aux = vlb_loss(batch.y0, batch.x, tau, model, state.rng, schedule, mats)
    total = loss + cfg.aux_weight * aux
    if not torch.isfinite(total):
        raise FloatingPointError(f"non-finite loss at step {state.step}: loss={loss.item()} aux={aux.item()}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    return StepResult(state.step, loss.item(), aux.item(), total.item(), state.lr)


def lr_schedule(state: TrainState, current_val_loss: float, cfg: TrainConfig) -> float:
    """Decay the LR once per ``patience`` steps without strict improvement."""
    if current_val_loss < state.best_val:
        state.best_val = current_val_loss
        state.mark = state.step
    elif state.step - state.mark >= cfg.patience:
        state.lr *= cfg.lr_decay
        state.mark = state.step
    return state.lr


def _val_pairs(corpus: Sequence[Pair], cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    items = list(corpus)[: cfg.val_items] if cfg.val_items else list(corpus)
    xs = np.stack([crop_bars(s.roll, 0, cfg.crop_bars).cells for s, _ in items])
    ys = np.stack([crop_bars(a, 0, cfg.crop_bars).cells for _, a in items])
    return xs, ys


@torch.no_grad()
def validate(
    model: Denoiser,
    val_corpus: Sequence[Pair],
    schedule: NoiseSchedule,
    rng_seed: int,
    cfg: TrainConfig = TrainConfig(),
    mats: ScheduleTensors | None = None,
    with_f1: bool = True,
) -> tuple[float, float]:
    """Mean diffusion loss and onset-cell F1 of generations against the targets."""
    model.eval()
    xs, ys = _val_pairs(val_corpus, cfg)
    rng = np.random.default_rng(rng_seed)
    tau = rng.integers(1, schedule.steps + 1, size=len(xs))
    losses = [vlb_loss(ys[i : i + 1], xs[i : i + 1], tau[i : i + 1], model, rng, schedule, mats)[0].item() for i in range(len(xs))]
    f1 = float("nan")
    if with_f1:
        gen = generate_cells(xs, model, schedule, cfg.val_as_sampling, rng)
        f1 = onset_prf(gen, ys)[2]
    return float(np.mean(losses)), f1


LOG_HEADER = "# step,loss,aux,lr,val_loss,val_f1"


def format_log(res: StepResult, val: tuple[float, float] | None = None) -> str:
    vl, vf = ("", "") if val is None else (f"{val[0]:.6f}", f"{val[1]:.6f}")
    return f"{res.step},{res.loss:.6f},{res.aux:.6f},{res.lr:.6g},{vl},{vf}"


def state_meta(state: TrainState, model: Denoiser) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    names = {id(p): n for n, p in model.named_parameters()}
    arrays = []
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            st = state.optimizer.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            for key in ("step", "exp_avg", "exp_avg_sq"):
                arrays.append((f"optim/{n}/{key}", st[key].detach().cpu().numpy().reshape(st[key].shape)))
    meta = {
        "step": state.step,
        "lr": state.lr,
        "best_val": None if math.isinf(state.best_val) else state.best_val,
        "mark": state.mark,
        "rng": state.rng.bit_generator.state,
    }
    return meta, arrays


def save_training(path: str | Path, model: Denoiser, state: TrainState, extra_meta: dict | None = None) -> bytes:
    meta, arrays = state_meta(state, model)
    meta.update(extra_meta or {})
    return save_checkpoint(path, model, {"train": meta}, arrays)


def restore_training(source, cfg: TrainConfig) -> tuple[Denoiser, TrainState, dict]:
    model, meta, arrays = load_checkpoint(source)
    tm = meta["train"]
    opt = make_optimizer(model, cfg, tm["lr"])
    for n, p in model.named_parameters():
        key = f"optim/{n}/"
        if key + "step" in arrays:
            opt.state[p] = {
                "step": torch.from_numpy(arrays[key + "step"].copy()),
                "exp_avg": torch.from_numpy(arrays[key + "exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[key + "exp_avg_sq"].copy()),
            }
    rng = np.random.default_rng()
    rng.bit_generator.state = tm["rng"]
    best = math.inf if tm["best_val"] is None else tm["best_val"]
    return model, TrainState(tm["step"], tm["lr"], best, tm["mark"], rng, opt), meta


def fit(
    model: Denoiser,
    corpus: Sequence[Pair],
    val_corpus: Sequence[Pair] | None,
    cfg: TrainConfig,
    diffusion: DiffusionConfig = DiffusionConfig(),
    state: TrainState | None = None,
    emit: Callable[[str], None] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> TrainState:
    """Train until ``cfg.max_steps``; ``emit`` receives every log line."""
    schedule = diffusion.schedule()
    mats = ScheduleTensors(schedule, next(model.parameters()).dtype)
    state = state or init_state(model, cfg)
    emit = emit or (lambda line: None)
    while state.step < cfg.max_steps:
        batch = make_batch(corpus, cfg, state.rng)
        res = train_step(state, batch, model, schedule, cfg, mats)
        state.history.append(res)
        val = None
        if val_corpus and cfg.val_every and state.step % cfg.val_every == 0:
            val = validate(model, val_corpus, schedule, cfg.seed * 1_000_003 + state.step, cfg, mats)
            lr_schedule(state, val[0], cfg)
        if val is not None or state.step % max(cfg.log_every, 1) == 0 or state.step == cfg.max_steps:
            emit(format_log(res, val))
        if checkpoint_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_training(Path(checkpoint_dir) / f"step{state.step:07d}.ckpt", model, state)
    return state


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
