"""Shared strategies and builders for the test suite."""
import numpy as np
from hypothesis import strategies as st

from pianodiff.roll import roll_from_notes


def random_roll(rng, n_frames, density=0.05):
    notes = []
    for p in range(21, 109):
        t = 0
        while t < n_frames:
            if rng.random() < density:
                length = int(rng.integers(1, 9))
                notes.append((p, t, min(t + length, n_frames)))
                t += length + int(rng.integers(0, 3))
            else:
                t += 1
    return roll_from_notes(notes, n_frames)[0]


@st.composite
def rolls(draw, max_frames=48):
    seed = draw(st.integers(0, 2**32 - 1))
    n = draw(st.integers(1, max_frames))
    return random_roll(np.random.default_rng(seed), n, draw(st.sampled_from([0.0, 0.02, 0.1])))


def directional_check(fn, params, eps=1e-6, seed=0):
    """Compare autograd against a central difference along a random direction.

    ``fn`` returns a scalar tensor; ``params`` are leaf tensors it depends on.
    Returns ``(analytic, numeric)``.
    """
    import torch

    gen = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
    grads = torch.autograd.grad(fn(), params, allow_unused=True)
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs) if g is not None)
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(eps * d)
        up = float(fn())
        for p, d in zip(params, dirs):
            p.sub_(2 * eps * d)
        down = float(fn())
        for p, d in zip(params, dirs):
            p.add_(eps * d)
    return analytic, (up - down) / (2 * eps)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)
