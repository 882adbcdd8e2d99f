"""Multi-head scaled dot-product cross-attention."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, add_const, matmul, reshape, scale, softmax_rows, transpose


@dataclass
class AttentionParams:
    w_q: Tensor  # d_q x d_model
    w_k: Tensor  # d_kv x d_model
    w_v: Tensor  # d_kv x d_model
    w_o: Tensor  # d_model x d_out
    heads: int

    @property
    def d_model(self) -> int:
        return self.w_q.shape[1]


def uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def init_attention(d_q: int, d_kv: int, d_model: int, heads: int, seed: int,
                   d_out: int | None = None) -> AttentionParams:
    if heads < 1 or d_model % heads:
        raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
    rng = np.random.default_rng(seed)
    return AttentionParams(
        w_q=uniform_init(rng, d_q, d_model),
        w_k=uniform_init(rng, d_kv, d_model),
        w_v=uniform_init(rng, d_kv, d_model),
        w_o=uniform_init(rng, d_model, d_q if d_out is None else d_out),
        heads=heads,
    )


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``T x (H*dh)`` -> ``H x T x dh``."""
    t, d = x.shape
    return transpose(reshape(x, (t, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, t, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (t, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Core attention on already projected ``q``, ``k``, ``v`` (each ``T x d_model``).

    ``mask`` is an additive ``T_q x T_kv`` array (0 or -inf style large negatives).
    """
    dh = q.shape[1] // heads
    qh = split_heads(q, heads)
    kh = transpose(reshape(k, (k.shape[0], heads, dh)), (1, 2, 0))
    vh = split_heads(v, heads)
    scores = scale(matmul(qh, kh), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add_const(scores, mask)
    return merge_heads(matmul(softmax_rows(scores), vh))


def cross_attention(q_seq: Tensor, kv_seq: Tensor, p: AttentionParams) -> Tensor:
    """Queries from ``q_seq`` attend over ``kv_seq``; output has ``q_seq``'s length."""
    if q_seq.ndim != 2 or kv_seq.ndim != 2:
        raise ShapeError("cross_attention expects 2-D sequences")
    if q_seq.shape[1] != p.w_q.shape[0] or kv_seq.shape[1] != p.w_k.shape[0]:
        raise ShapeError(
            f"cross_attention: query dim {q_seq.shape[1]} / key dim {kv_seq.shape[1]} "
            f"do not match parameters ({p.w_q.shape[0]}, {p.w_k.shape[0]})")
    if q_seq.shape[0] < 1 or kv_seq.shape[0] < 1:
        raise ShapeError("cross_attention needs at least one query and one key")
    q = q_seq @ p.w_q
    k = kv_seq @ p.w_k
    v = kv_seq @ p.w_v
    return attend(q, k, v, p.heads) @ p.w_o
