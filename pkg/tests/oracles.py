"""Independent reference computations used as test oracles.

Nothing here calls the library's posterior or kernel code; only schedule
tables (per-step alpha, beta, gamma) are taken as inputs.
"""
import itertools
import math

import numpy as np

N = 4
MASK = 3


def step_prob(alpha, beta, gamma, to_state, from_state):
    """q(y_t = to | y_{t-1} = from) written out case by case."""
    if from_state == MASK:
        return 1.0 if to_state == MASK else 0.0
    if to_state == MASK:
        return gamma
    return alpha + beta if to_state == from_state else beta


def cumulative(alpha, beta, gamma):
    """Cumulative tables by summing over every path of hidden states, one step at a time."""
    steps = len(alpha) - 1
    out = [np.eye(N)]
    for t in range(1, steps + 1):
        prev = out[-1]
        cur = np.zeros((N, N))
        for y0, k, j in itertools.product(range(N), repeat=3):
            cur[j, y0] += step_prob(alpha[t], beta[t], gamma[t], j, k) * prev[k, y0]
        out.append(cur)
    return out


def brute_posterior(alpha, beta, gamma, qbar, y_tau, y0, tau):
    """q(y_{tau-1} | y_tau, y0) by enumerating the joint over y_{tau-1} and normalizing."""
    joint = np.array([qbar[tau - 1][k, y0] * step_prob(alpha[tau], beta[tau], gamma[tau], y_tau, k) for k in range(N)])
    z = joint.sum()
    return None if z == 0 else joint / z


def kl(p, q):
    return sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q) if pi > 0)


def expected_step_kl(alpha, beta, gamma, qbar, y0, p0, tau):
    """E over y_tau ~ q(.|y0) of KL(q(y_{tau-1}|y_tau,y0) || sum_i q(y_{tau-1}|y_tau,i) p0[i]).

    ``p0`` is a 3-vector that does not depend on y_tau. At tau == 1 the term
    is -log p0[y0].
    """
    if tau == 1:
        return -math.log(p0[y0])
    total = 0.0
    for j in range(N):
        w = qbar[tau][j, y0]
        if w == 0:
            continue
        target = brute_posterior(alpha, beta, gamma, qbar, j, y0, tau)
        model = np.zeros(N)
        for i in range(3):
            post = brute_posterior(alpha, beta, gamma, qbar, j, i, tau)
            if post is not None:
                model += p0[i] * post
        total += w * kl(target, model)
    return total
