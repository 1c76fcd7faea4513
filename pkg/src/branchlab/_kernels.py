"""Numba event loops for the branching simulators.

Each replication owns one RNG stream, seeded explicitly at kernel entry, so
parallel and serial schedules produce bit-identical draws.  Particle motion
uses lazily updated positions: a Brownian increment is realized only at branch
events and snapshot times, which is exact because the motion is independent of
the branching structure.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = ["branching_segment", "mass_chain_segment"]


@njit(cache=True)
def branching_segment(seed, x_in, t0, t1, rate, aprob, aalias, kvals, cap):
    """Evolve particles at positions ``x_in`` from time t0 to t1.

    Each particle waits Exp(rate), moves by a Gaussian increment over the
    elapsed time, and splits into k children (k = 0 allowed: death).  Lineages
    are statistically independent, so the tree is unrolled depth-first per
    input particle; no global event ordering is needed between snapshots.

    Returns (positions_at_t1, truncated).  When the live output exceeds
    ``cap`` the segment aborts and reports truncation.
    """
    np.random.seed(seed)
    m = aprob.shape[0]
    out = np.empty(cap, dtype=np.float64)
    n_out = 0
    stack_x = np.empty(1024, dtype=np.float64)
    stack_t = np.empty(1024, dtype=np.float64)
    for i in range(x_in.shape[0]):
        top = 0
        stack_x[0] = x_in[i]
        stack_t[0] = t0
        while top >= 0:
            x = stack_x[top]
            t = stack_t[top]
            top -= 1
            alive = True
            while alive:
                w = np.random.exponential(1.0) / rate
                if t + w >= t1:
                    if n_out >= cap:
                        return out[:0], True
                    out[n_out] = x + np.random.normal(0.0, 1.0) * np.sqrt(t1 - t)
                    n_out += 1
                    alive = False
                else:
                    t += w
                    x += np.random.normal(0.0, 1.0) * np.sqrt(w)
                    j = int(np.random.random() * m)
                    if np.random.random() >= aprob[j]:
                        j = aalias[j]
                    k = kvals[j]
                    if k == 0:
                        alive = False
                    else:
                        need = top + k - 1
                        if need + 1 > stack_x.shape[0]:
                            new_size = stack_x.shape[0]
                            while new_size < need + 1:
                                new_size *= 2
                            nx = np.empty(new_size, dtype=np.float64)
                            nt = np.empty(new_size, dtype=np.float64)
                            nx[: top + 1] = stack_x[: top + 1]
                            nt[: top + 1] = stack_t[: top + 1]
                            stack_x = nx
                            stack_t = nt
                        for _ in range(k - 1):
                            top += 1
                            stack_x[top] = x
                            stack_t[top] = t
                        # continue in place as the remaining child
                        if top + 1 + n_out > cap:
                            return out[:0], True
    return out[:n_out], False


@njit(cache=True)
def mass_chain_segment(seed, n0, rate, t_len, aprob, aalias, kvals, cap):
    """Total-count jump chain over a window of length ``t_len``.

    The population branches at total rate ``rate * n``; each event replaces one
    individual by k drawn from the alias table.  Returns (count, truncated).
    """
    np.random.seed(seed)
    m = aprob.shape[0]
    n = n0
    t = 0.0
    while n > 0:
        w = np.random.exponential(1.0) / (rate * n)
        if t + w >= t_len:
            break
        t += w
        j = int(np.random.random() * m)
        if np.random.random() >= aprob[j]:
            j = aalias[j]
        n += kvals[j] - 1
        if n > cap:
            return n, True
    return n, False
