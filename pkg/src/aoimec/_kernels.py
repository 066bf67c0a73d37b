"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names (``drain``, ``rvi``, ``pds_run``, ``q_run``) are bound at
import time.  Set ``AOIMEC_NUMBA=0`` in the environment to force the numpy
path; numba is also skipped silently when it is not importable.  Both paths
are always importable under their explicit names (``drain_numba``,
``drain_numpy`` ...) so tests and the benchmark can compare them.
"""
import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("AOIMEC_NUMBA", "1").lower() not in ("0", "false", "no", "off")


def _jit(fn):
    if HAS_NUMBA:
        return njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# FCFS queue drain
# ---------------------------------------------------------------------------

def _drain_loop(offsets, rem, processed, tol, clamp):
    n_seg = offsets.shape[0] - 1
    out = rem.copy()
    completions = np.zeros(n_seg, dtype=np.int64)
    wasted = np.zeros(n_seg, dtype=np.float64)
    for s in range(n_seg):
        budget = processed[s]
        lo = offsets[s]
        hi = offsets[s + 1]
        if clamp and hi > lo and budget > out[lo]:
            budget = out[lo]
        k = lo
        while k < hi and budget > 0.0:
            r = out[k]
            if budget >= r - tol:
                budget -= r
                out[k] = 0.0
                completions[s] += 1
                k += 1
            else:
                out[k] = r - budget
                budget = 0.0
        if budget > 0.0:
            wasted[s] = budget
    return out, completions, wasted


drain_numba = _jit(_drain_loop)


def drain_numpy(offsets, rem, processed, tol, clamp):
    """Vectorised drain over ragged segments via per-segment cumulative sums."""
    offsets = np.asarray(offsets, dtype=np.int64)
    rem = np.asarray(rem, dtype=np.float64)
    processed = np.asarray(processed, dtype=np.float64).copy()
    n_seg = offsets.shape[0] - 1
    lens = np.diff(offsets)
    nonempty = lens > 0
    if clamp:
        hol = np.zeros(n_seg)
        hol[nonempty] = rem[offsets[:-1][nonempty]]
        processed = np.minimum(processed, np.where(nonempty, hol, processed))
    seg = np.repeat(np.arange(n_seg), lens)
    csum = np.cumsum(rem)
    base = np.concatenate(([0.0], csum))[offsets[:-1]]
    local = csum - base[seg]  # bits needed to finish each task and all before it
    done = local <= processed[seg] + tol
    completions = np.bincount(seg, weights=done, minlength=n_seg).astype(np.int64)
    out = rem.copy()
    out[done] = 0.0
    # partial progress on the first unfinished task of each segment
    first = offsets[:-1] + completions
    partial = nonempty & (completions < lens)
    idx = first[partial]
    out[idx] = local[idx] - processed[partial]
    total = np.zeros(n_seg)
    np.add.at(total, seg, rem)
    wasted = np.where(completions == lens, np.maximum(processed - total, 0.0), 0.0)
    return out, completions, wasted


# ---------------------------------------------------------------------------
# Relative value iteration
# ---------------------------------------------------------------------------

def _rvi_loop(P, C, ref, tol, max_sweeps):
    S, A = C.shape
    h = np.zeros(S)
    q = np.empty((S, A))
    new = np.empty(S)
    gain = 0.0
    for sweep in range(max_sweeps):
        for s in range(S):
            best = np.inf
            for a in range(A):
                acc = C[s, a]
                for s2 in range(S):
                    acc += P[s, a, s2] * h[s2]
                q[s, a] = acc
                if acc < best:
                    best = acc
            new[s] = best
        lo = np.inf
        hi = -np.inf
        for s in range(S):
            d = new[s] - h[s]
            if d < lo:
                lo = d
            if d > hi:
                hi = d
        gain = new[ref]
        for s in range(S):
            h[s] = new[s] - gain
        if hi - lo < tol:
            return gain, h, q, sweep + 1
    return gain, h, q, -1


rvi_numba = _jit(_rvi_loop)


def rvi_numpy(P, C, ref, tol, max_sweeps):
    S = C.shape[0]
    h = np.zeros(S)
    for sweep in range(max_sweeps):
        q = C + P @ h
        new = q.min(axis=1)
        diff = new - h
        gain = new[ref]
        h = new - gain
        if diff.max() - diff.min() < tol:
            return gain, h, q, sweep + 1
    return gain, h, C + P @ h, -1


# ---------------------------------------------------------------------------
# Tabular post-decision-state learning on an explicit MDP
# ---------------------------------------------------------------------------

def _pds_loop(cost, post, pu_cdf, uniforms, s0, value, v0, t0, beta_exp):
    """Runs len(uniforms) PDS learning steps.  Returns (value, v, v_trace, s)."""
    S, A = cost.shape
    n = uniforms.shape[0]
    trace = np.empty(n)
    v = v0
    s = s0
    for k in range(n):
        t = t0 + k
        beta = 1.0 / (t ** beta_exp)
        # greedy action and V(s)
        best = np.inf
        act = 0
        for a in range(A):
            x = cost[s, a] + value[post[s, a]]
            if x < best:
                best = x
                act = a
        vs = best - v
        pds = post[s, act]
        u = uniforms[k]
        s2 = 0
        row = pu_cdf[pds]
        while s2 < S - 1 and u >= row[s2]:
            s2 += 1
        best2 = np.inf
        for a in range(A):
            x = cost[s2, a] + value[post[s2, a]]
            if x < best2:
                best2 = x
        vs2 = best2 - v
        value[pds] = (1.0 - beta) * value[pds] + beta * vs2
        v = (1.0 - beta) * v + beta * (cost[s, act] + vs2 - vs)
        trace[k] = v
        s = s2
    return value, v, trace, s


pds_numba = _jit(_pds_loop)


def pds_numpy(cost, post, pu_cdf, uniforms, s0, value, v0, t0, beta_exp):
    S = cost.shape[0]
    n = uniforms.shape[0]
    trace = np.empty(n)
    v = float(v0)
    s = int(s0)
    for k in range(n):
        beta = 1.0 / ((t0 + k) ** beta_exp)
        q = cost[s] + value[post[s]]
        act = int(np.argmin(q))
        vs = q[act] - v
        pds = post[s, act]
        s2 = min(int(np.searchsorted(pu_cdf[pds], uniforms[k], side="right")), S - 1)
        vs2 = np.min(cost[s2] + value[post[s2]]) - v
        value[pds] = (1.0 - beta) * value[pds] + beta * vs2
        v = (1.0 - beta) * v + beta * (cost[s, act] + vs2 - vs)
        trace[k] = v
        s = s2
    return value, v, trace, s


# ---------------------------------------------------------------------------
# Average-cost Q-learning on an explicit MDP
# ---------------------------------------------------------------------------

def _q_loop(cost, p_cdf, uniforms, explore, s0, qtab, v0, t0, beta_exp, eps_min):
    """uniforms has shape (n, 3): exploration coin, random action, transition."""
    S, A = cost.shape
    n = uniforms.shape[0]
    trace = np.empty(n)
    v = v0
    s = s0
    for k in range(n):
        t = t0 + k
        beta = 1.0 / (t ** beta_exp)
        eps = max(eps_min, 1.0 / np.sqrt(t)) if explore else 0.0
        act = 0
        best = np.inf
        for a in range(A):
            if qtab[s, a] < best:
                best = qtab[s, a]
                act = a
        min_s = best
        if uniforms[k, 0] < eps:
            act = min(int(uniforms[k, 1] * A), A - 1)
        u = uniforms[k, 2]
        row = p_cdf[s, act]
        s2 = 0
        while s2 < S - 1 and u >= row[s2]:
            s2 += 1
        min_s2 = np.inf
        for a in range(A):
            if qtab[s2, a] < min_s2:
                min_s2 = qtab[s2, a]
        c = cost[s, act]
        qtab[s, act] = (1.0 - beta) * qtab[s, act] + beta * (c - v + min_s2)
        v = (1.0 - beta) * v + beta * (c + min_s2 - min_s)
        trace[k] = v
        s = s2
    return qtab, v, trace, s


q_numba = _jit(_q_loop)


def q_numpy(cost, p_cdf, uniforms, explore, s0, qtab, v0, t0, beta_exp, eps_min):
    S, A = cost.shape
    n = uniforms.shape[0]
    trace = np.empty(n)
    v = float(v0)
    s = int(s0)
    for k in range(n):
        t = t0 + k
        beta = 1.0 / (t ** beta_exp)
        eps = max(eps_min, 1.0 / np.sqrt(t)) if explore else 0.0
        act = int(np.argmin(qtab[s]))
        min_s = qtab[s, act]
        if uniforms[k, 0] < eps:
            act = min(int(uniforms[k, 1] * A), A - 1)
        s2 = min(int(np.searchsorted(p_cdf[s, act], uniforms[k, 2], side="right")), S - 1)
        min_s2 = qtab[s2].min()
        c = cost[s, act]
        qtab[s, act] = (1.0 - beta) * qtab[s, act] + beta * (c - v + min_s2)
        v = (1.0 - beta) * v + beta * (c + min_s2 - min_s)
        trace[k] = v
        s = s2
    return qtab, v, trace, s


if USE_NUMBA:
    drain, rvi, pds_run, q_run = drain_numba, rvi_numba, pds_numba, q_numba
else:
    drain, rvi, pds_run, q_run = drain_numpy, rvi_numpy, pds_numpy, q_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
