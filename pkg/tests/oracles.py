"""Independent reference implementations used as test oracles.

None of these import the package under test; they are deliberately naive
(explicit loops, exhaustive enumeration, extended precision).
"""
from __future__ import annotations

import functools
import itertools
import math

import mpmath
import numpy as np

mpmath.mp.dps = 50


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def mp_softmax(row) -> list[float]:
    xs = [mpmath.mpf(float(x)) for x in row]
    z = mpmath.fsum(mpmath.exp(x) for x in xs)
    return [float(mpmath.exp(x) / z) for x in xs]


def mp_cross_entropy(logits: np.ndarray, targets) -> float:
    total = mpmath.mpf(0)
    for row, t in zip(logits, targets):
        xs = [mpmath.mpf(float(x)) for x in row]
        total += mpmath.log(mpmath.fsum(mpmath.exp(x) for x in xs)) - xs[t]
    return float(total / len(targets))


def head_attention(q_seq, kv_seq, w_q, w_k, w_v, w_o, heads, mask=None) -> np.ndarray:
    """One head at a time with explicit row loops for the softmax."""
    d_model = w_q.shape[1]
    dh = d_model // heads
    q_all, k_all, v_all = q_seq @ w_q, kv_seq @ w_k, kv_seq @ w_v
    out_heads = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        q, k, v = q_all[:, sl], k_all[:, sl], v_all[:, sl]
        rows = []
        for i in range(q.shape[0]):
            scores = np.array([q[i] @ k[j] / math.sqrt(dh) for j in range(k.shape[0])])
            if mask is not None:
                scores = scores + mask[i]
            w = np.exp(scores - scores.max())
            w /= w.sum()
            rows.append(sum(w[j] * v[j] for j in range(v.shape[0])))
        out_heads.append(np.array(rows))
    return np.concatenate(out_heads, axis=1) @ w_o


def collapse(path, blank=0) -> tuple:
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


@functools.lru_cache(maxsize=None)
def _paths_by_label(t_len: int, v: int) -> tuple[np.ndarray, dict]:
    paths = np.array(list(itertools.product(range(v), repeat=t_len)), dtype=np.int64)
    groups: dict[tuple, list[int]] = {}
    for i, path in enumerate(paths):
        groups.setdefault(collapse(path), []).append(i)
    return paths, {k: np.array(idx) for k, idx in groups.items()}


def ctc_brute_force(log_probs: np.ndarray, target) -> float:
    """-log of the summed probability of every length-T path collapsing to ``target``."""
    t_len, v = log_probs.shape
    paths, groups = _paths_by_label(t_len, v)
    idx = groups.get(tuple(int(x) for x in target))
    if idx is None:
        return math.inf
    scores = log_probs[np.arange(t_len)[None, :], paths[idx]].sum(axis=1)
    top = scores.max()
    return float(-(top + math.log(math.fsum(np.exp(scores - top)))))


def min_edits_exhaustive(ref, hyp) -> int:
    """Minimum S+D+I by breadth-first search over edit scripts (no DP table)."""
    ref, hyp = tuple(ref), tuple(hyp)
    frontier = {(0, 0)}
    seen = set(frontier)
    cost = 0
    while True:
        nxt = set()
        for i, j in frontier:
            # free diagonal moves on matches
            while i < len(ref) and j < len(hyp) and ref[i] == hyp[j]:
                i, j = i + 1, j + 1
            if i == len(ref) and j == len(hyp):
                return cost
            for step in ((i + 1, j + 1), (i + 1, j), (i, j + 1)):
                if step[0] <= len(ref) and step[1] <= len(hyp) and step not in seen:
                    seen.add(step)
                    nxt.add(step)
        frontier = nxt
        cost += 1


def remove_repeats_brute(tokens, n: int):
    """Lag-p duplicate-block removal, restarting from the left after every deletion."""
    out = list(tokens)
    while True:
        hit = None
        for i in range(1, len(out) - n + 1):
            block = out[i:i + n]
            if any(out[i - p:i - p + n] == block for p in range(1, min(n, i) + 1)):
                hit = i
                break
        if hit is None:
            return out
        del out[hit:hit + n]


def is_subsequence(small, big) -> bool:
    it = iter(big)
    return all(any(x == y for y in it) for x in small)


def conv1d_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Valid strided convolution; ``w`` is ``(kernel*d_in) x d_out`` in frame-major order."""
    t, d_in = x.shape
    t_out = (t - kernel) // stride + 1
    out = np.zeros((t_out, w.shape[1]))
    for o in range(t_out):
        for c in range(w.shape[1]):
            s = b[c]
            for k in range(kernel):
                for d in range(d_in):
                    s += x[o * stride + k, d] * w[k * d_in + d, c]
            out[o, c] = s
    return out
