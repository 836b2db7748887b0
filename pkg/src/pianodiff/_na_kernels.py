"""Numba kernels for neighborhood attention forward and backward passes.

Arrays are head-major and flattened over the grid: ``q``, ``k``, ``v`` are
``(B, heads, N, head_dim)`` with ``N = T * P``. ``nbr`` and ``slot`` are
``(N, n)`` key indices and bias slots with the used slots packed first;
``count[i]`` says how many are used. Accumulation stays in the input dtype.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# no "ninf"/"nnan": the running max starts at -inf
_FM = {"reassoc", "contract", "arcp", "nsz", "afn"}


@njit(cache=True, fastmath=_FM)
def na_forward(q, k, v, rpb, nbr, count, slot, scale):
    b_sz, n_h, n_q, d = q.shape
    attn = np.zeros((b_sz, n_h, n_q, nbr.shape[1]), dtype=q.dtype)
    out = np.zeros_like(q)
    sc = q.dtype.type(scale)
    for b in range(b_sz):
        for h in range(n_h):
            qb, kb, vb, ob, ab, rb = q[b, h], k[b, h], v[b, h], out[b, h], attn[b, h], rpb[h]
            for i in range(n_q):
                m = count[i]
                top = q.dtype.type(-np.inf)
                for j in range(m):
                    kj = nbr[i, j]
                    s = q.dtype.type(0)
                    for c in range(d):
                        s += qb[i, c] * kb[kj, c]
                    s = s * sc + rb[slot[i, j]]
                    ab[i, j] = s
                    if s > top:
                        top = s
                total = q.dtype.type(0)
                for j in range(m):
                    e = np.exp(ab[i, j] - top)
                    ab[i, j] = e
                    total += e
                inv = q.dtype.type(1) / total
                for j in range(m):
                    a = ab[i, j] * inv
                    ab[i, j] = a
                    kj = nbr[i, j]
                    for c in range(d):
                        ob[i, c] += a * vb[kj, c]
    return out, attn


@njit(cache=True, fastmath=_FM)
def na_backward(grad, q, k, v, attn, nbr, count, slot, scale, n_slots):
    b_sz, n_h, n_q, d = q.shape
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    drpb = np.zeros((n_h, n_slots), dtype=q.dtype)
    da = np.empty(nbr.shape[1], dtype=q.dtype)
    sc = q.dtype.type(scale)
    for b in range(b_sz):
        for h in range(n_h):
            gb, qb, kb, vb, ab = grad[b, h], q[b, h], k[b, h], v[b, h], attn[b, h]
            dqb, dkb, dvb, drb = dq[b, h], dk[b, h], dv[b, h], drpb[h]
            for i in range(n_q):
                m = count[i]
                dot = q.dtype.type(0)
                for j in range(m):
                    kj = nbr[i, j]
                    a = ab[i, j]
                    s = q.dtype.type(0)
                    for c in range(d):
                        s += gb[i, c] * vb[kj, c]
                        dvb[kj, c] += a * gb[i, c]
                    da[j] = s
                    dot += a * s
                for j in range(m):
                    kj = nbr[i, j]
                    g = ab[i, j] * (da[j] - dot)
                    drb[slot[i, j]] += g
                    g = g * sc
                    for c in range(d):
                        dqb[i, c] += g * kb[kj, c]
                        dkb[kj, c] += g * qb[i, c]
    return dq, dk, dv, drpb
