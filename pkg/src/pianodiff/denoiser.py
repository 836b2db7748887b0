"""Lead-sheet encoder and timestep-conditioned denoising decoder.

Both halves share one state-embedding table. Each embeds its roll, runs a
bidirectional LSTM along time independently for every pitch row, then a
stack of dilated neighborhood-attention blocks. The decoder concatenates
the encoder output with the embedded noisy roll and conditions its blocks
on the diffusion step through adaptive layer norm.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .na import NA2DBlock
from .roll import N_PITCHES, N_STATES, PianoRoll

N_OUT = N_STATES - 1


@dataclass(frozen=True)
class DenoiserConfig:
    n_layers: int = 4
    window: int = 5
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    state_embed_dim: int = 4
    hidden_dim: int = 32
    timestep_embed_dim: int = 32
    n_heads: int = 2
    enc_layers: int | None = None
    ffn_mult: int = 2
    steps: int = 100

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.enc_layers is None:
            object.__setattr__(self, "enc_layers", max(1, self.n_layers // 2))
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd, got {self.window}")
        if len(self.dilations) != self.n_layers:
            raise ValueError(f"{len(self.dilations)} dilations for {self.n_layers} layers")
        if min(self.dilations, default=1) < 1:
            raise ValueError("dilations must be >= 1")
        dims = (self.n_layers, self.state_embed_dim, self.hidden_dim, self.timestep_embed_dim, self.n_heads, self.enc_layers)
        if min(dims) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.hidden_dim % 2 or self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be even and divisible by n_heads")
        if self.enc_layers > self.n_layers:
            raise ValueError("encoder cannot be deeper than the decoder")

    @property
    def enc_dilations(self) -> tuple[int, ...]:
        return self.dilations[: self.enc_layers]

    @classmethod
    def full_scale(cls) -> "DenoiserConfig":
        return cls(n_layers=10, dilations=(1, 2, 4, 8, 16, 1, 2, 4, 8, 16), hidden_dim=64, n_heads=4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{**d, "dilations": tuple(d["dilations"])})


def timestep_features(tau: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half, 1))
    angles = tau.to(dtype)[:, None] * freqs[None]
    out = torch.cat([angles.sin(), angles.cos()], -1)
    if dim % 2:
        out = torch.cat([out, torch.zeros_like(out[:, :1])], -1)
    return out


class PitchwiseBiLSTM(nn.Module):
    """Bidirectional LSTM along time, weights shared across the 88 pitch rows."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.lstm = nn.LSTM(in_dim, out_dim // 2, batch_first=True, bidirectional=True)
        hid = out_dim // 2
        for name, w in self.lstm.named_parameters():
            if name.startswith("weight_hh"):
                for g in range(4):
                    nn.init.orthogonal_(w.data[g * hid : (g + 1) * hid])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, p, d = x.shape
        seq = x.permute(0, 2, 1, 3).reshape(b * p, t, d)
        out, _ = self.lstm(seq)
        return out.reshape(b, p, t, -1).permute(0, 2, 1, 3)


class Encoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        h = cfg.hidden_dim
        self.rnn = PitchwiseBiLSTM(cfg.state_embed_dim, h)
        self.pitch = nn.Parameter(torch.randn(N_PITCHES, h) * 0.02)
        self.blocks = nn.ModuleList(
            NA2DBlock(h, cfg.n_heads, cfg.window, d, None, cfg.ffn_mult) for d in cfg.enc_dilations
        )
        self.out = nn.Linear(h, h)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        x = self.rnn(emb) + self.pitch
        for blk in self.blocks:
            x = blk(x)
        return self.out(x)


class Decoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        h = cfg.hidden_dim
        self.cfg = cfg
        self.inp = nn.Linear(cfg.state_embed_dim + h, h)
        self.pitch = nn.Parameter(torch.randn(N_PITCHES, h) * 0.02)
        self.rnn = PitchwiseBiLSTM(h, h)
        self.blocks = nn.ModuleList(
            NA2DBlock(h, cfg.n_heads, cfg.window, d, cfg.timestep_embed_dim, cfg.ffn_mult) for d in cfg.dilations
        )
        self.norm = nn.LayerNorm(h)
        self.head = nn.Linear(h, N_OUT)

    def forward(self, emb: torch.Tensor, enc: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        cond = timestep_features(tau, self.cfg.timestep_embed_dim, emb.dtype)
        x = self.inp(torch.cat([emb, enc], -1)) + self.pitch
        x = self.rnn(x)
        for blk in self.blocks:
            x = blk(x, cond)
        return self.head(self.norm(x))


class Denoiser(nn.Module):
    """Predicts ONSET/SUSTAIN/OFF probabilities of the clean roll."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        self.embedding = nn.Embedding(N_STATES, self.cfg.state_embed_dim)
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)

    def embed(self, states: torch.Tensor) -> torch.Tensor:
        return self.embedding(states.long())

    def condition(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(self.embed(x))

    def log_probs(self, y_tau: torch.Tensor, cond: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        if y_tau.shape != cond.shape[:3]:
            raise ValueError(f"noisy roll {tuple(y_tau.shape)} does not match encoding {tuple(cond.shape[:3])}")
        tau = torch.as_tensor(tau, dtype=torch.long).reshape(-1).expand(y_tau.shape[0])
        if tau.min() < 1 or tau.max() > self.cfg.steps:
            raise ValueError(f"timestep outside [1, {self.cfg.steps}]")
        logits = self.decoder(self.embed(y_tau), cond, tau)
        return logits.log_softmax(-1)

    def forward(self, y_tau: torch.Tensor, x: torch.Tensor, tau: torch.Tensor) -> torch.Tensor:
        return self.log_probs(y_tau, self.condition(x), tau)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@torch.no_grad()
def embed_states(roll: PianoRoll, model: Denoiser) -> np.ndarray:
    return model.embed(torch.as_tensor(roll.cells.astype(np.int64))).numpy()


@torch.no_grad()
def encode_lead_sheet(x: PianoRoll, model: Denoiser) -> torch.Tensor:
    """Encoder features ``(1, T, 88, hidden_dim)`` for one lead-sheet roll."""
    return model.condition(torch.as_tensor(x.cells.astype(np.int64))[None])


@torch.no_grad()
def denoise(y_tau: PianoRoll, enc: torch.Tensor, tau: int, model: Denoiser) -> np.ndarray:
    """Clean-state distribution ``(T, 88, 3)`` for a noisy roll."""
    if enc.dim() == 3:
        enc = enc[None]
    states = torch.as_tensor(y_tau.cells.astype(np.int64))[None]
    return model.log_probs(states, enc, torch.tensor([tau])).exp()[0].numpy()


def param_groups(model: Denoiser) -> dict[str, list[tuple[str, nn.Parameter]]]:
    """Parameters bucketed by sub-module, as used by gradient checks."""
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:3]) if parts[0] in ("encoder", "decoder") and parts[1] == "blocks" else ".".join(parts[:2])
        groups.setdefault(key, []).append((name, p))
    return groups
