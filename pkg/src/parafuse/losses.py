"""CTC and token cross-entropy losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, _result, logsumexp

BLANK = 0


class InfeasibleAlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class CtcTarget:
    tokens: tuple[int, ...]
    blank_id: int = BLANK

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ValueError("CTC target must contain at least one token")
        if self.blank_id in self.tokens:
            raise ValueError(f"CTC target contains the blank id {self.blank_id}")

    def min_frames(self) -> int:
        repeats = sum(1 for a, b in zip(self.tokens, self.tokens[1:]) if a == b)
        return len(self.tokens) + repeats


def _extended(target: CtcTarget) -> np.ndarray:
    ext = np.full(2 * len(target.tokens) + 1, target.blank_id, dtype=np.int64)
    ext[1::2] = target.tokens
    return ext


def _ctc_tables(lp: np.ndarray, ext: np.ndarray):
    t_len, s_len = lp.shape[0], ext.size
    neg = -np.inf
    # skip transition s-2 -> s allowed onto a label that differs from the label two back
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != ext[:-2]) & (ext[2:] != ext[0])
    emit = lp[:, ext]  # T x S

    alpha = np.full((t_len, s_len), neg)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        a1 = np.concatenate(([neg], prev[:-1]))
        a2 = np.where(skip, np.concatenate(([neg, neg], prev[:-2])), neg)
        alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + emit[t]

    beta = np.full((t_len, s_len), neg)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_fwd = np.concatenate((skip[2:], [False, False]))  # s -> s+2 allowed
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = np.concatenate((nxt[1:], [neg]))
        b2 = np.where(skip_fwd, np.concatenate((nxt[2:], [neg, neg])), neg)
        beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[t]
    return alpha, beta, emit


def ctc_loss(log_probs: Tensor, target: CtcTarget) -> Tensor:
    """Negative log-likelihood of ``target`` under frame log-probabilities ``log_probs`` (T x V)."""
    lp = log_probs.data
    if lp.ndim != 2:
        raise ShapeError(f"ctc_loss expects T x V log-probabilities, got {lp.shape}")
    if max(target.tokens) >= lp.shape[1]:
        raise ShapeError(f"target token {max(target.tokens)} outside vocabulary of {lp.shape[1]}")
    if lp.shape[0] < target.min_frames():
        raise InfeasibleAlignmentError(
            f"{lp.shape[0]} frames cannot emit target of length {len(target.tokens)} "
            f"(needs {target.min_frames()})")
    ext = _extended(target)
    alpha, beta, emit = _ctc_tables(lp, ext)
    log_p = np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if ext.size > 1 else alpha[-1, -1]

    def bw(g):
        # occupancy of each extended state, divided out of the emission counted twice
        occ = alpha + beta - emit - log_p
        grad = np.zeros_like(lp)
        for k in np.unique(ext):
            cols = ext == k
            grad[:, k] = -np.exp(logsumexp(occ[:, cols], axis=1))
        return (g * grad,)

    return _result(np.array(-log_p), (log_probs,), bw)


def ctc_collapse(path: Sequence[int], blank_id: int = BLANK) -> list[int]:
    """Merge repeats, then drop blanks."""
    out, prev = [], None
    for p in path:
        if p != prev and p != blank_id:
            out.append(int(p))
        prev = p
    return out


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean token negative log-likelihood."""
    z = logits.data
    tgt = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or tgt.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape} vs {tgt.shape[0]} targets")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= z.shape[1]):
        raise IndexError(f"target index outside [0, {z.shape[1]})")
    logp = z - logsumexp(z, axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    n = z.shape[0]

    def bw(g):
        grad = np.exp(logp)
        grad[rows, tgt] -= 1.0
        return (g * grad / n,)

    return _result(np.array(-logp[rows, tgt].mean()), (logits,), bw)
