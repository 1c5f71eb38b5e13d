"""Independent reference computations used by the tests.

Nothing here imports from ``dpkws``; each function restates the quantity
from its definition so it can check the package implementation.
"""

import itertools

import numpy as np


def frame_nll(z, y, sigma):
    """-log p_y of softmax(z / sigma), written as log1p of non-target ratios.

    The log1p form keeps relative precision when p_y is close to one, which
    finite differences need.
    """
    z = np.asarray(z, dtype=np.float64)
    others = np.delete(z, y)
    return np.log1p(np.exp((others - z[y]) / sigma).sum())


def batch_loss(Z, ys, sigmas):
    return np.mean([frame_nll(z, y, s) for z, y, s in zip(Z, ys, sigmas)])


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    """Norm-relative error; exactly 0 when both sides are exactly 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / den)


def forward_brute_force(log_emissions, log_trans):
    """log sum over every state path from state 0 to the last state.

    ``log_trans[i, j]`` is the log transition probability; the path must
    start in state 0 at the first frame and sit in the last state at the
    final frame.
    """
    T, S = log_emissions.shape
    terms = []
    for path in itertools.product(range(S), repeat=T):
        if path[0] != 0 or path[-1] != S - 1:
            continue
        lp = log_emissions[0, path[0]]
        for t in range(1, T):
            lp += log_trans[path[t - 1], path[t]] + log_emissions[t, path[t]]
        terms.append(lp)
    if not terms:
        return -np.inf
    terms = np.array(terms)
    m = terms.max()
    if m == -np.inf:
        return -np.inf
    return m + np.log(np.exp(terms - m).sum())


def frr_sweep(pos, neg, hours, fa_per_hour):
    """Exhaustive threshold sweep: smallest observed score meeting the FA budget."""
    candidates = sorted(set(np.concatenate([pos, neg]).tolist()))
    for thr in candidates:
        fa = np.sum(np.asarray(neg) >= thr) / hours
        if fa <= fa_per_hour:
            return float(np.mean(np.asarray(pos) < thr)), thr, False
    return 1.0, np.inf, True
