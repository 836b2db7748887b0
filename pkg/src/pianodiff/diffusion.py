"""Discrete diffusion over note states with an absorbing MASK state.

Matrices are column-stochastic: ``Q[t][j, i] = q(y_t = j | y_{t-1} = i)``,
so a one-hot column vector ``e_i`` is pushed forward as ``Q[t] @ e_i``. The
MASK column is ``(0, 0, 0, 1)``, which makes MASK absorbing.

Index 0 of every per-step array is the identity step, so ``Qbar[0] = I`` and
``Qbar[t] = Q[t] @ Q[t-1] @ ... @ Q[1]``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch

from .roll import MASK, N_STATES, LeadSheet, PianoRoll, repair_sustain

N_CLEAN = N_STATES - 1


class X0Model(Protocol):
    """Anything that predicts the clean-state distribution of every cell."""

    def condition(self, x: torch.Tensor) -> torch.Tensor:
        """Encode lead-sheet states ``(B, T, 88)`` once per sample."""

    def log_probs(self, y_tau: torch.Tensor, cond: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        """Return ``(B, T, 88, 3)`` log-probabilities over ONSET/SUSTAIN/OFF."""


@dataclass(frozen=True)
class DiffusionConfig:
    steps: int = 100
    alpha_bar_end: float = 0.009
    gamma_bar_end: float = 0.99
    aux_weight: float = 5.0e-4

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")

    def schedule(self) -> "NoiseSchedule":
        return NoiseSchedule.linear(self.steps, self.alpha_bar_end, self.gamma_bar_end)


def _step_matrix(alpha: float, beta: float, gamma: float) -> np.ndarray:
    q = np.full((N_STATES, N_STATES), beta, dtype=np.float64)
    np.fill_diagonal(q, alpha + beta)
    q[MASK, :] = gamma
    q[:, MASK] = 0.0
    q[MASK, MASK] = 1.0
    return q


class NoiseSchedule:
    """Per-step preserve/perturb/mask probabilities and their matrix products."""

    def __init__(self, alpha, beta, gamma):
        alpha, beta, gamma = (np.asarray(a, dtype=np.float64).ravel() for a in (alpha, beta, gamma))
        if not len(alpha) == len(beta) == len(gamma) >= 1:
            raise ValueError("alpha, beta and gamma must be equal-length and non-empty")
        if min(alpha.min(), beta.min(), gamma.min()) < 0:
            raise ValueError("schedule probabilities must be non-negative")
        total = alpha + 3 * beta + gamma
        if np.abs(total - 1).max() > 1e-12:
            raise ValueError(f"alpha + 3 beta + gamma deviates from 1 by {np.abs(total - 1).max():.3g}")
        self.steps = len(alpha)
        self.alpha = np.concatenate([[1.0], alpha])
        self.beta = np.concatenate([[0.0], beta])
        self.gamma = np.concatenate([[0.0], gamma])
        self.Q = np.stack([_step_matrix(a, b, g) for a, b, g in zip(self.alpha, self.beta, self.gamma)])
        qbar = [np.eye(N_STATES)]
        for t in range(1, self.steps + 1):
            qbar.append(self.Q[t] @ qbar[-1])
        self.Qbar = np.stack(qbar)
        for arr in (self.alpha, self.beta, self.gamma, self.Q, self.Qbar):
            arr.setflags(write=False)

    @classmethod
    def linear(cls, steps: int = 100, alpha_bar_end: float = 0.009, gamma_bar_end: float = 0.99):
        """Cumulative keep probability falls and cumulative mask probability rises linearly."""
        s = np.arange(steps + 1) / steps
        abar = 1.0 - s * (1.0 - alpha_bar_end)
        gbar = s * gamma_bar_end
        alpha = abar[1:] / abar[:-1]
        gamma = 1.0 - (1.0 - gbar[1:]) / (1.0 - gbar[:-1])
        beta = np.maximum((1.0 - alpha - gamma) / 3.0, 0.0)
        gamma = 1.0 - alpha - 3.0 * beta
        sched = cls(alpha, beta, gamma)
        # rounding in the matrix product can land the endpoint a few ulps low
        for _ in range(64):
            short = gamma_bar_end - sched.gamma_bar[-1]
            if short <= 0:
                break
            step = max(short, np.spacing(gamma_bar_end)) / (1.0 - sched.gamma_bar[-2])
            gamma[-1] = min(gamma[-1] + 2 * step, 1.0 - 3.0 * beta[-1])
            alpha[-1] = 1.0 - 3.0 * beta[-1] - gamma[-1]
            sched = cls(alpha, beta, gamma)
        return sched

    def absorbing(self) -> "NoiseSchedule":
        """The same masking rate with perturbation switched off."""
        g = self.gamma[1:]
        return NoiseSchedule(1.0 - g, np.zeros_like(g), g)

    @property
    def alpha_bar(self) -> np.ndarray:
        return self.Qbar[:, 0, 0] - self.Qbar[:, 1, 0]

    @property
    def beta_bar(self) -> np.ndarray:
        return self.Qbar[:, 1, 0]

    @property
    def gamma_bar(self) -> np.ndarray:
        return self.Qbar[:, MASK, 0]

    def check_step(self, tau: int, lo: int = 1) -> None:
        if not lo <= tau <= self.steps:
            raise ValueError(f"timestep {tau} outside [{lo}, {self.steps}]")

    def dumps(self) -> str:
        lines = ["# tau alpha beta gamma alpha_bar gamma_bar"]
        abar, gbar = self.alpha_bar, self.gamma_bar
        for t in range(1, self.steps + 1):
            vals = (self.alpha[t], self.beta[t], self.gamma[t], abar[t], gbar[t])
            lines.append(" ".join([str(t), *(repr(float(v)) for v in vals)]))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "NoiseSchedule":
        rows = [ln.split() for ln in io.StringIO(text) if ln.strip() and not ln.startswith("#")]
        taus = [int(r[0]) for r in rows]
        if taus != list(range(1, len(rows) + 1)):
            raise ValueError("schedule table must list tau = 1..T in order")
        data = np.array([[float(v) for v in r[1:6]] for r in rows])
        sched = cls(data[:, 0], data[:, 1], data[:, 2])
        if np.abs(sched.alpha_bar[1:] - data[:, 3]).max() > 1e-12 or np.abs(sched.gamma_bar[1:] - data[:, 4]).max() > 1e-12:
            raise ValueError("cumulative columns disagree with the per-step columns")
        return sched

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("alpha", "beta", "gamma"))


def transition_matrix(schedule: NoiseSchedule, tau: int) -> np.ndarray:
    schedule.check_step(tau)
    return schedule.Q[tau].copy()


def sample_forward(y0: np.ndarray, tau, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Vectorized ``y_tau ~ q(y_tau | y0)``; ``tau`` is a scalar or one value per leading item."""
    y0 = np.asarray(y0)
    if (y0 == MASK).any():
        raise ValueError("clean rolls must not contain MASK")
    tau = np.asarray(tau)
    if tau.ndim:
        tau = tau.reshape(tau.shape + (1,) * (y0.ndim - 1))
    probs = schedule.Qbar[tau, :, y0]
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(y0.shape)
    return np.minimum((u[..., None] >= cdf).sum(-1), MASK).astype(np.uint8)


def forward_sample(y0: PianoRoll, tau: int, rng_seed: int, schedule: NoiseSchedule) -> PianoRoll:
    schedule.check_step(tau)
    cells = sample_forward(y0.cells, tau, schedule, np.random.default_rng(rng_seed))
    return PianoRoll(cells, validate=False)


class UnreachableStateError(ValueError):
    pass


def posterior(
    y_tau: int,
    y0_dist,
    tau: int,
    schedule: NoiseSchedule,
    exclude_unreachable: bool = False,
) -> np.ndarray:
    """``sum_i q(y_{tau-1} | y_tau, y0=i) * y0_dist[i]`` for one cell.

    ``y0_dist`` holds 3 (clean states) or 4 entries. With
    ``exclude_unreachable`` the clean states that cannot produce ``y_tau``
    are dropped and the remaining weights renormalized; otherwise any such
    state carrying mass raises :class:`UnreachableStateError`.
    """
    schedule.check_step(tau)
    dist = np.zeros(N_STATES)
    d = np.asarray(y0_dist, dtype=np.float64)
    dist[: len(d)] = d
    num = schedule.Q[tau][y_tau, :, None] * schedule.Qbar[tau - 1]
    den = schedule.Qbar[tau][y_tau]
    ok = den > 0
    if exclude_unreachable:
        dist = np.where(ok, dist, 0.0)
        if dist.sum() <= 0:
            raise UnreachableStateError(f"state {y_tau} unreachable at step {tau}")
        dist = dist / dist.sum()
    elif (dist[~ok] > 0).any():
        raise UnreachableStateError(f"state {y_tau} unreachable at step {tau} from the given y0 support")
    cond = np.divide(num, den, out=np.zeros_like(num), where=ok)
    return cond @ dist


class ScheduleTensors:
    """Torch copies of a schedule's matrices in one dtype."""

    def __init__(self, schedule: NoiseSchedule, dtype=torch.float32):
        self.schedule = schedule
        self.Q = torch.tensor(np.array(schedule.Q), dtype=dtype)
        self.Qbar = torch.tensor(np.array(schedule.Qbar), dtype=dtype)
        self.dtype = dtype


def reverse_kernel(
    y_tau: torch.Tensor,
    p0: torch.Tensor,
    tau: torch.Tensor,
    mats: ScheduleTensors,
    exclude_unreachable: bool = False,
) -> torch.Tensor:
    """Batched :func:`posterior`: ``(B, T, P)`` states and ``(B, T, P, 3)`` clean probs -> ``(B, T, P, 4)``."""
    q_t = mats.Q[tau]  # (B, 4, 4)
    qbar_prev = mats.Qbar[tau - 1][:, :, :N_CLEAN]  # (B, 4 k, 3 i)
    qbar_t = mats.Qbar[tau][:, :, :N_CLEAN]  # (B, 4 j, 3 i)
    b_idx = torch.arange(y_tau.shape[0]).view(-1, 1, 1)
    row = q_t[b_idx, y_tau]  # (B, T, P, 4 k)
    den = qbar_t[b_idx, y_tau]  # (B, T, P, 3 i)
    reachable = den > 0
    w = p0
    if exclude_unreachable:
        w = torch.where(reachable, p0, torch.zeros_like(p0))
        w = w / w.sum(-1, keepdim=True)
    w = torch.where(reachable, w / torch.where(reachable, den, torch.ones_like(den)), torch.zeros_like(w))
    # out[k] = row[k] * sum_i qbar_prev[k, i] * w[i]
    mix = torch.einsum("bki,btpi->btpk", qbar_prev, w)
    return row * mix


def _as_long(a) -> torch.Tensor:
    if isinstance(a, PianoRoll):
        a = a.cells[None]
    if isinstance(a, torch.Tensor):
        return a.long()
    return torch.as_tensor(np.asarray(a, dtype=np.int64))


def _check_finite(values: torch.Tensor, what: str) -> None:
    bad = ~torch.isfinite(values)
    if bad.any():
        idx = tuple(int(i) for i in torch.nonzero(bad)[0])
        raise FloatingPointError(f"non-finite {what} at cell index {idx}")


def vlb_terms(
    model: X0Model,
    y0,
    x,
    tau,
    y_tau,
    mats: ScheduleTensors,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-cell-mean reverse KL and auxiliary cross-entropy for a batch.

    Items with ``tau == 1`` contribute ``-log p(y0 | y1)`` instead of a KL.
    """
    y0, x, y_tau = _as_long(y0), _as_long(x), _as_long(y_tau)
    tau = torch.as_tensor(np.atleast_1d(np.asarray(tau)), dtype=torch.long)
    if (y0 == MASK).any():
        raise ValueError("clean rolls must not contain MASK")
    logp0 = model.log_probs(y_tau, model.condition(x), tau)
    p0 = logp0.exp()
    onehot = torch.nn.functional.one_hot(y0, N_CLEAN).to(p0.dtype)
    nll = -logp0.gather(-1, y0.unsqueeze(-1)).squeeze(-1)

    q = reverse_kernel(y_tau, onehot, tau, mats)
    p = reverse_kernel(y_tau, p0, tau, mats)
    tiny = torch.finfo(p.dtype).tiny
    kl = (torch.xlogy(q, q) - q * torch.log(p.clamp_min(tiny))).sum(-1).clamp_min(0.0)

    first = (tau == 1).view(-1, 1, 1)
    per_cell = torch.where(first, nll, kl)
    _check_finite(per_cell, "loss")
    _check_finite(nll, "auxiliary loss")
    return per_cell.mean(), nll.mean()


def vlb_loss(
    y0,
    x,
    tau,
    model: X0Model,
    rng_seed: int | np.random.Generator,
    schedule: NoiseSchedule,
    mats: ScheduleTensors | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Corrupt ``y0`` to step ``tau`` and score the model on the reverse step."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    y0_np = y0.cells[None] if isinstance(y0, PianoRoll) else np.asarray(y0)
    x_np = x.roll.cells[None] if isinstance(x, LeadSheet) else (x.cells[None] if isinstance(x, PianoRoll) else x)
    tau_np = np.atleast_1d(np.asarray(tau, dtype=np.int64))
    if tau_np.min() < 1 or tau_np.max() > schedule.steps:
        raise ValueError(f"timestep outside [1, {schedule.steps}]")
    y_tau = sample_forward(y0_np, tau_np, schedule, rng)
    if mats is None:
        mats = ScheduleTensors(schedule, _model_dtype(model))
    return vlb_terms(model, y0_np, x_np, tau_np, y_tau, mats)


def prior_kl(y0: PianoRoll | np.ndarray, schedule: NoiseSchedule) -> float:
    """Mean per-cell ``KL(q(y_T | y0) || p(y_T))``.

    The prior keeps the terminal mask mass on MASK and spreads the rest
    evenly over the clean states; it is a point mass when the schedule
    ends fully masked.
    """
    cells = y0.cells if isinstance(y0, PianoRoll) else np.asarray(y0)
    g = schedule.gamma_bar[-1]
    prior = np.array([(1 - g) / 3] * 3 + [g])
    q = schedule.Qbar[-1][:, cells]  # (4, ...)
    q = np.moveaxis(q, 0, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(q) - np.log(prior)), 0.0)
    return float(terms.sum(-1).mean())


def _model_dtype(model) -> torch.dtype:
    params = getattr(model, "parameters", None)
    if params is not None:
        for p in params():
            return p.dtype
    return torch.float32


@torch.no_grad()
def generate_cells(
    x: np.ndarray,
    model: X0Model,
    schedule: NoiseSchedule,
    as_sampling: bool,
    rng: np.random.Generator,
) -> np.ndarray:
    """Reverse diffusion from all-MASK for a batch of lead-sheet grids ``(B, T, 88)``."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    sched = schedule.absorbing() if as_sampling else schedule
    mats = ScheduleTensors(sched, torch.float64)
    x_t = _as_long(x)
    cond = model.condition(x_t)
    y = np.full(x.shape, MASK, dtype=np.uint8)
    p0 = None
    for t in range(sched.steps, 0, -1):
        y_t = torch.as_tensor(y.astype(np.int64))
        tau = torch.full((x.shape[0],), t, dtype=torch.long)
        p0 = model.log_probs(y_t, cond, tau).double().exp()
        probs = reverse_kernel(y_t, p0, tau, mats, exclude_unreachable=True).numpy()
        cdf = np.cumsum(probs, axis=-1)
        cdf /= cdf[..., -1:]
        u = rng.random(y.shape)
        y = np.minimum((u[..., None] >= cdf).sum(-1), MASK).astype(np.uint8)
    left = y == MASK
    if left.any():
        y[left] = p0.argmax(-1).numpy().astype(np.uint8)[left]
    if (y == MASK).any():
        raise RuntimeError("MASK cells remain after the final reverse step")
    return np.stack([repair_sustain(item) for item in y])


def generate(
    x: LeadSheet | PianoRoll,
    model: X0Model,
    schedule: NoiseSchedule,
    as_sampling: bool = True,
    rng_seed: int = 0,
) -> PianoRoll:
    """Sample an accompaniment roll with the same frame count as the lead sheet."""
    roll = x.roll if isinstance(x, LeadSheet) else x
    cells = generate_cells(roll.cells[None], model, schedule, as_sampling, np.random.default_rng(rng_seed))
    return PianoRoll(cells[0])


__all__ = [
    "DiffusionConfig", "NoiseSchedule", "ScheduleTensors", "UnreachableStateError", "X0Model",
    "forward_sample", "generate", "generate_cells", "posterior", "prior_kl", "reverse_kernel",
    "sample_forward", "transition_matrix", "vlb_loss", "vlb_terms",
]
