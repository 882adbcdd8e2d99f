"""Projectors from fused speech features into the decoder embedding space."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, cross_attention, init_attention, uniform_init
from .tensor import ShapeError, Tensor, add_bias, concat, gelu, reshape, slice_rows, take_rows


class InputTooShortError(ValueError):
    pass


@dataclass
class LinearProjectorConfig:
    conv_layers: list[tuple[int, int]] = field(default_factory=lambda: [(3, 2)])
    mlp_hidden: int = 128
    d_in: int = 112
    d_llm: int = 96

    def __post_init__(self):
        self.conv_layers = [(int(k), int(s)) for k, s in self.conv_layers]
        for k, s in self.conv_layers:
            if k < 1 or s < 1:
                raise ValueError(f"conv stage ({k}, {s}) needs kernel and stride >= 1")

    @property
    def downsampling(self) -> int:
        return math.prod(s for _, s in self.conv_layers)

    def output_length(self, t: int) -> int:
        for k, s in self.conv_layers:
            if t < k:
                return 0
            t = (t - k) // s + 1
        return t

    def min_length(self) -> int:
        need = 1
        for k, s in reversed(self.conv_layers):
            need = (need - 1) * s + k
        return need


@dataclass
class LinearProjectorParams:
    conv_w: list[Tensor]  # (kernel*d_in) x d_in per stage
    conv_b: list[Tensor]
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_linear_projector(cfg: LinearProjectorConfig, seed: int) -> LinearProjectorParams:
    rng = np.random.default_rng(seed)
    conv_w, conv_b = [], []
    for k, _ in cfg.conv_layers:
        conv_w.append(uniform_init(rng, k * cfg.d_in, cfg.d_in))
        conv_b.append(Tensor(np.zeros(cfg.d_in)))
    return LinearProjectorParams(
        conv_w=conv_w, conv_b=conv_b,
        w1=uniform_init(rng, cfg.d_in, cfg.mlp_hidden), b1=Tensor(np.zeros(cfg.mlp_hidden)),
        w2=uniform_init(rng, cfg.mlp_hidden, cfg.d_llm), b2=Tensor(np.zeros(cfg.d_llm)),
    )


def conv1d(x: Tensor, w: Tensor, b: Tensor, kernel: int, stride: int) -> Tensor:
    """Valid-padding strided convolution over time, as gather + matmul."""
    t, d = x.shape
    t_out = (t - kernel) // stride + 1
    idx = np.arange(t_out)[:, None] * stride + np.arange(kernel)[None, :]
    windows = reshape(take_rows(x, idx), (t_out, kernel * d))
    return add_bias(windows @ w, b)


def linear_projector(seq: Tensor, cfg: LinearProjectorConfig, params: LinearProjectorParams) -> Tensor:
    if seq.shape[1] != cfg.d_in:
        raise ShapeError(f"linear projector expects d_in={cfg.d_in}, got {seq.shape[1]}")
    if cfg.output_length(seq.shape[0]) < 1:
        raise InputTooShortError(
            f"input of length {seq.shape[0]} is too short; need T >= {cfg.min_length()}")
    x = seq
    for i, (k, s) in enumerate(cfg.conv_layers):
        if i:
            x = gelu(x)
        x = conv1d(x, params.conv_w[i], params.conv_b[i], k, s)
    h = gelu(add_bias(x @ params.w1, params.b1))
    return add_bias(h @ params.w2, params.b2)


@dataclass
class QFormerConfig:
    window: int = 2
    queries_per_window: int = 1
    layers: int = 1
    heads: int = 4
    d_in: int = 112
    d_llm: int = 96
    mlp_hidden: int = 128

    def __post_init__(self):
        if self.window < 1 or self.queries_per_window < 1:
            raise ValueError("window and queries_per_window must be >= 1")
        if self.d_llm % self.heads:
            raise ValueError(f"d_llm={self.d_llm} is not divisible by heads={self.heads}")

    def output_length(self, t: int) -> int:
        return -(-t // self.window) * self.queries_per_window


@dataclass
class QFormerBlock:
    attn: AttentionParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class QFormerParams:
    queries: Tensor  # queries_per_window x d_llm
    blocks: list[QFormerBlock]


def init_qformer(cfg: QFormerConfig, seed: int) -> QFormerParams:
    rng = np.random.default_rng(seed)
    queries = Tensor(rng.normal(0.0, 1.0, size=(cfg.queries_per_window, cfg.d_llm)))
    blocks = []
    for _ in range(cfg.layers):
        attn = init_attention(cfg.d_llm, cfg.d_in, cfg.d_llm, cfg.heads, int(rng.integers(2**31)))
        blocks.append(QFormerBlock(
            attn=attn,
            w1=uniform_init(rng, cfg.d_llm, cfg.mlp_hidden), b1=Tensor(np.zeros(cfg.mlp_hidden)),
            w2=uniform_init(rng, cfg.mlp_hidden, cfg.d_llm), b2=Tensor(np.zeros(cfg.d_llm)),
        ))
    return QFormerParams(queries=queries, blocks=blocks)


def _summarize_window(frames: Tensor, params: QFormerParams) -> Tensor:
    x = params.queries
    for blk in params.blocks:
        x = x + cross_attention(x, frames, blk.attn)
        x = x + add_bias(gelu(add_bias(x @ blk.w1, blk.b1)) @ blk.w2, blk.b2)
    return x


def qformer_projector(seq: Tensor, cfg: QFormerConfig, params: QFormerParams) -> Tensor:
    """Learnable queries summarise each window of ``cfg.window`` frames independently."""
    t, d = seq.shape
    if d != cfg.d_in:
        raise ShapeError(f"Q-Former expects d_in={cfg.d_in}, got {d}")
    if t < 1:
        raise ShapeError("Q-Former needs at least one frame")
    outs = [_summarize_window(slice_rows(seq, s, min(s + cfg.window, t)), params)
            for s in range(0, t, cfg.window)]
    return outs[0] if len(outs) == 1 else concat(outs, axis=0)
