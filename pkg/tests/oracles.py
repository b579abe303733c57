"""Reference implementations used as test oracles; deliberately naive."""
from __future__ import annotations

import itertools

import numpy as np


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den)


def line_graph_brute(edges):
    """Dual edges by checking every pair of primal edges for a shared endpoint."""
    nodes = sorted(tuple(sorted(e)) for e in edges)
    out = set()
    for p, q in itertools.combinations(range(len(nodes)), 2):
        if set(nodes[p]) & set(nodes[q]):
            out.add((p, q))
    return nodes, out


def ttt_window(a3_history, n_ttt: int) -> bool:
    """Handover fires iff the last ``n_ttt`` A3 flags are all set."""
    return len(a3_history) >= n_ttt and all(a3_history[-n_ttt:])


def huber_scalar(x: float, delta: float) -> float:
    return 0.5 * x * x if abs(x) <= delta else delta * (abs(x) - 0.5 * delta)


def td_target_scalar(r: float, gamma: float, done: bool, q1: float, q2: float) -> float:
    return r + gamma * (0.0 if done else 1.0) * min(q1, q2)


def round_robin_trace(required, n_prb: int, start: int = 0):
    """Literal pass-by-pass round robin: one PRB per still-hungry UE per pass."""
    req = list(required)
    m = len(req)
    alloc = [0] * m
    left = n_prb
    while left > 0 and any(a < r for a, r in zip(alloc, req)):
        for k in range(m):
            u = (start + k) % m
            if left == 0:
                break
            if alloc[u] < req[u]:
                alloc[u] += 1
                left -= 1
    return alloc


def ttt_fire_times(a3_rows, n_ttt: int, score_rows=None):
    """Brute-force TTT over an (n, J) Boolean history.

    At each instant, neighbour j is eligible when its last ``n_ttt`` flags are
    all true and no handover fired inside that window. Returns a list of
    (instant, target) pairs.
    """
    fires = []
    last_fire = -1
    for n in range(len(a3_rows)):
        lo = n - n_ttt + 1
        if lo <= last_fire:
            continue
        if lo < 0:
            continue
        eligible = [j for j in range(len(a3_rows[n])) if all(a3_rows[k][j] for k in range(lo, n + 1))]
        if eligible:
            scores = score_rows[n] if score_rows is not None else [0.0] * len(a3_rows[n])
            best = max(eligible, key=lambda j: (scores[j], -j))
            fires.append((n, best))
            last_fire = n
    return fires
