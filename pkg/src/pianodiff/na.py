"""Dilated 2-D neighborhood attention on the (time, pitch) grid.

Each axis is split into ``dilation`` interleaved sub-grids. Within its
sub-grid a query attends to ``window`` consecutive positions centred on
itself, shifted inward at the borders so that the key count stays
``window`` whenever the sub-grid is long enough. Keys are gathered
explicitly, so cells outside a query's neighborhood never enter its
computation.
"""
from __future__ import annotations

import functools
import math

import numpy as np
import torch
from torch import nn

from ._na_kernels import na_backward, na_forward


@functools.lru_cache(maxsize=256)
def axis_neighborhood(length: int, window: int, dilation: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-axis key positions, validity mask and relative offsets.

    Returns three ``(length, window)`` arrays: absolute key index, whether the
    slot is used (short sub-grids leave trailing slots empty), and the
    offset ``key_sub - query_sub`` in sub-grid units.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    idx = np.zeros((length, window), dtype=np.int64)
    valid = np.zeros((length, window), dtype=bool)
    rel = np.zeros((length, window), dtype=np.int64)
    half = window // 2
    for i in range(length):
        r, s = i % dilation, i // dilation
        n = (length - r + dilation - 1) // dilation
        k = min(window, n)
        start = min(max(s - half, 0), n - k)
        sub = start + np.arange(k)
        idx[i, :k] = r + dilation * sub
        idx[i, k:] = idx[i, k - 1]
        valid[i, :k] = True
        rel[i, :k] = sub - s
    for a in (idx, valid, rel):
        a.setflags(write=False)
    return idx, valid, rel


@functools.lru_cache(maxsize=64)
def grid_neighborhood(n_t: int, n_p: int, window: int, dilation: int):
    """Flattened key indices ``(T, P, w*w)``, validity and relative-bias slots."""
    it, vt, rt = axis_neighborhood(n_t, window, dilation)
    ip, vp, rp = axis_neighborhood(n_p, window, dilation)
    flat = it[:, None, :, None] * n_p + ip[None, :, None, :]
    valid = vt[:, None, :, None] & vp[None, :, None, :]
    span = 2 * window - 1
    bias_slot = (rt[:, None, :, None] + window - 1) * span + (rp[None, :, None, :] + window - 1)
    shape = (n_t, n_p, window * window)
    return (
        torch.from_numpy(flat.reshape(shape).copy()),
        torch.from_numpy(valid.reshape(shape).copy()),
        torch.from_numpy(bias_slot.reshape(shape).copy()),
    )


@functools.lru_cache(maxsize=64)
def packed_neighborhood(n_t: int, n_p: int, window: int, dilation: int):
    """Flat ``(N, w*w)`` key indices and bias slots with used slots first, plus per-query counts."""
    flat, valid, slot = (a.reshape(n_t * n_p, -1).numpy() for a in grid_neighborhood(n_t, n_p, window, dilation))
    order = np.argsort(~valid, axis=1, kind="stable")
    nbr = np.ascontiguousarray(np.take_along_axis(flat, order, 1))
    slots = np.ascontiguousarray(np.take_along_axis(slot, order, 1))
    return nbr, valid.sum(1).astype(np.int64), slots


def _head_major(t: torch.Tensor) -> np.ndarray:
    b, n_t, n_p, h, d = t.shape
    return t.detach().reshape(b, n_t * n_p, h, d).transpose(1, 2).contiguous().numpy()


def _grid_major(a: np.ndarray, shape) -> torch.Tensor:
    b, n_t, n_p, h, d = shape
    return torch.from_numpy(a).transpose(1, 2).reshape(b, n_t, n_p, h, d)


class _NAFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, q, k, v, rpb, nbr, count, slot):
        scale = 1.0 / math.sqrt(q.shape[-1])
        qh, kh, vh = _head_major(q), _head_major(k), _head_major(v)
        out, attn = na_forward(qh, kh, vh, rpb.detach().contiguous().numpy(), nbr, count, slot, scale)
        ctx.extra = (qh, kh, vh, attn, nbr, count, slot, scale, rpb.shape[1], q.shape)
        return _grid_major(out, q.shape)

    @staticmethod
    def backward(ctx, grad):
        qh, kh, vh, attn, nbr, count, slot, scale, n_slots, shape = ctx.extra
        dq, dk, dv, drpb = na_backward(_head_major(grad), qh, kh, vh, attn, nbr, count, slot, scale, n_slots)
        return (
            _grid_major(dq, shape), _grid_major(dk, shape), _grid_major(dv, shape),
            torch.from_numpy(drpb), None, None, None,
        )


def na2d_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    window: int,
    dilation: int,
    rpb: torch.Tensor | None = None,
) -> torch.Tensor:
    """Attention over dilated neighborhoods.

    ``q``, ``k``, ``v`` are ``(B, T, P, heads, head_dim)``; ``rpb`` is an
    optional ``(heads, (2w-1)**2)`` relative position bias.
    """
    _, n_t, n_p, h, _ = q.shape
    if rpb is None:
        rpb = q.new_zeros(h, (2 * window - 1) ** 2)
    nbr, count, slot = packed_neighborhood(n_t, n_p, window, dilation)
    return _NAFunction.apply(q, k, v, rpb.to(q.dtype), nbr, count, slot)


def na2d_attention_reference(q, k, v, window, dilation, rpb=None):
    """Gather-based torch version of :func:`na2d_attention`, for testing."""
    b, n_t, n_p, h, d = q.shape
    flat, valid, slot = grid_neighborhood(n_t, n_p, window, dilation)
    kf = k.reshape(b, n_t * n_p, h, d)[:, flat]  # (B, T, P, n, h, d)
    vf = v.reshape(b, n_t * n_p, h, d)[:, flat]
    logits = torch.einsum("btphd,btpnhd->btphn", q, kf) / math.sqrt(d)
    if rpb is not None:
        logits = logits + rpb[:, slot].permute(1, 2, 0, 3)
    logits = logits.masked_fill(~valid[:, :, None, :], float("-inf"))
    return torch.einsum("btphn,btpnhd->btphd", logits.softmax(-1), vf)


class NeighborhoodAttention2D(nn.Module):
    def __init__(self, dim: int, n_heads: int, window: int, dilation: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads, self.window, self.dilation = n_heads, window, dilation
        self.qkv = nn.Linear(dim, 3 * dim)
        self.rpb = nn.Parameter(torch.zeros(n_heads, (2 * window - 1) ** 2))
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, p, c = x.shape
        q, k, v = self.qkv(x).view(b, t, p, 3, self.n_heads, c // self.n_heads).unbind(3)
        out = na2d_attention(q, k, v, self.window, self.dilation, self.rpb)
        return self.proj(out.reshape(b, t, p, c))


class NA2DBlock(nn.Module):
    """Pre-norm attention + feedforward block, optionally with adaptive norms.

    With ``cond_dim`` set, both layer norms lose their own affine parameters
    and take scale/shift from a small perceptron over the conditioning
    vector. Its output layer starts at zero, so the block starts out as a
    plain pre-norm block.
    """

    def __init__(self, dim: int, n_heads: int, window: int, dilation: int, cond_dim: int | None = None, ffn_mult: int = 2):
        super().__init__()
        adaptive = cond_dim is not None
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=not adaptive)
        self.attn = NeighborhoodAttention2D(dim, n_heads, window, dilation)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=not adaptive)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))
        self.ada = None
        if adaptive:
            self.ada = nn.Sequential(nn.Linear(cond_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, 4 * dim))
            nn.init.zeros_(self.ada[-1].weight)
            nn.init.zeros_(self.ada[-1].bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        if self.ada is None:
            x = x + self.attn(self.norm1(x))
            return x + self.ffn(self.norm2(x))
        if cond is None:
            raise ValueError("adaptive block needs a conditioning vector")
        s1, b1, s2, b2 = (m[:, None, None, :] for m in self.ada(cond).chunk(4, -1))
        x = x + self.attn(self.norm1(x) * (1 + s1) + b1)
        return x + self.ffn(self.norm2(x) * (1 + s2) + b2)
