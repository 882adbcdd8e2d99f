"""Toy speech encoders standing in for the whisper-like and mhubert-like models."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapters import LoraAdapter, init_lora, lora_forward
from .attention import attend, uniform_init
from .data import SyntheticUtterance, TaskSpec
from .losses import CtcTarget, ctc_loss
from .optim import AdamHyper, OptimizerState, adam_step, clip_global_norm, make_batches
from .tensor import GradTape, ShapeError, Tensor, add_all, add_bias, add_const, gelu, log_softmax_rows, scale, transpose

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class EncoderBlock:
    w_q: Tensor  # d x d, applied as x @ w.T
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w1: Tensor  # d x 2d, applied as x @ w
    b1: Tensor
    w2: Tensor
    b2: Tensor
    lora_q: LoraAdapter | None = None
    lora_v: LoraAdapter | None = None


@dataclass
class ToyEncoder:
    name: str
    w_in: Tensor  # d_in x d_out
    b_in: Tensor
    blocks: list[EncoderBlock]
    heads: int = 4
    ctc_history: list[float] = field(default_factory=list)

    @property
    def d_in(self) -> int:
        return self.w_in.shape[0]

    @property
    def d_out(self) -> int:
        return self.w_in.shape[1]


@dataclass
class FeatureSequence:
    data: Tensor
    source: str


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / d))
    pe = np.zeros((t, d))
    pe[:, 0:2 * (d // 2):2] = np.sin(angle)
    pe[:, 1:2 * (d // 2):2] = np.cos(angle)
    return pe


def init_encoder(name: str, d_in: int, d_out: int, layers: int = 1, heads: int = 4,
                 seed: int = 0) -> ToyEncoder:
    """Random stand-in for a pretrained encoder."""
    if d_out % heads:
        raise ValueError(f"d_out={d_out} is not divisible by heads={heads}")
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(layers):
        blk = EncoderBlock(
            w_q=uniform_init(rng, d_out, d_out), w_k=uniform_init(rng, d_out, d_out),
            w_v=uniform_init(rng, d_out, d_out), w_o=uniform_init(rng, d_out, d_out),
            w1=uniform_init(rng, d_out, 2 * d_out), b1=Tensor(np.zeros(2 * d_out)),
            w2=uniform_init(rng, 2 * d_out, d_out), b2=Tensor(np.zeros(d_out)),
        )
        blocks.append(blk)
    return ToyEncoder(name=name, w_in=uniform_init(rng, d_in, d_out), b_in=Tensor(np.zeros(d_out)),
                      blocks=blocks, heads=heads)


def attach_lora(enc: ToyEncoder, rank: int = 4, alpha: float = 8.0, seed: int = 0) -> ToyEncoder:
    """Copy of ``enc`` with zero-initialised adapters on every attention q/v projection."""
    enc = copy.deepcopy(enc)
    rng = np.random.default_rng(seed)
    for blk in enc.blocks:
        blk.lora_q = init_lora(enc.d_out, enc.d_out, rank, alpha, int(rng.integers(2**31)))
        blk.lora_v = init_lora(enc.d_out, enc.d_out, rank, alpha, int(rng.integers(2**31)))
    return enc


def _proj(x: Tensor, w: Tensor, ad: LoraAdapter | None) -> Tensor:
    return x @ transpose(w) if ad is None else lora_forward(x, w, ad)


def encode(view, enc: ToyEncoder) -> FeatureSequence:
    x = view if isinstance(view, Tensor) else Tensor(view)
    if x.ndim != 2 or x.shape[1] != enc.d_in:
        raise ShapeError(f"{enc.name} expects frames of dim {enc.d_in}, got shape {x.shape}")
    h = add_const(add_bias(x @ enc.w_in, enc.b_in), sinusoidal_positions(x.shape[0], enc.d_out))
    for blk in enc.blocks:
        q = _proj(h, blk.w_q, blk.lora_q)
        k = h @ transpose(blk.w_k)
        v = _proj(h, blk.w_v, blk.lora_v)
        h = h + attend(q, k, v, enc.heads) @ transpose(blk.w_o)
        h = h + add_bias(gelu(add_bias(h @ blk.w1, blk.b1)) @ blk.w2, blk.b2)
    return FeatureSequence(h, enc.name)


def encoder_tensors(enc: ToyEncoder, lora: bool = False) -> dict[str, Tensor]:
    """Named base tensors (``lora=False``) or adapter tensors (``lora=True``)."""
    out = {}
    if not lora:
        out["w_in"], out["b_in"] = enc.w_in, enc.b_in
    for i, blk in enumerate(enc.blocks):
        if lora:
            for slot in ("lora_q", "lora_v"):
                ad = getattr(blk, slot)
                if ad is not None:
                    out[f"blocks.{i}.{slot}.a"] = ad.a
                    out[f"blocks.{i}.{slot}.b"] = ad.b
        else:
            for f in ("w_q", "w_k", "w_v", "w_o", "w1", "b1", "w2", "b2"):
                out[f"blocks.{i}.{f}"] = getattr(blk, f)
    return out


def ctc_targets(utt: SyntheticUtterance, task: TaskSpec, view: str) -> CtcTarget:
    """Per-view CTC labels: the half of each token's identity the view carries (+1 for blank)."""
    idx = 0 if view == "w" else 1
    return CtcTarget(tuple(task.split(t)[idx] + 1 for t in utt.tokens))


def pretrain_ctc_encoder(enc: ToyEncoder, data: Sequence[SyntheticUtterance], epochs: int,
                         task: TaskSpec, view: str = "m", trainable: str = "all",
                         lr: float = 3e-3, seed: int = 0, max_seconds: float = 120.0) -> ToyEncoder:
    """Fine-tune a copy of ``enc`` with a throwaway CTC head on one view.

    ``trainable`` is ``"all"`` (full fine-tuning) or ``"lora"`` (adapters only).
    Training stops early once the epoch-average loss stops improving; the best
    epoch's parameters are returned. ``ctc_history`` holds the epoch-average
    loss before training followed by one entry per completed epoch.
    """
    if not data:
        raise ValueError("CTC fine-tuning needs at least one utterance")
    enc = copy.deepcopy(enc)
    params = encoder_tensors(enc, lora=(trainable == "lora"))
    if not params:
        raise ValueError(f"encoder {enc.name} has no {trainable} parameters")
    rng = np.random.default_rng(seed)
    head = uniform_init(rng, enc.d_out, task.half_size + 1)
    head_b = Tensor(np.zeros(task.half_size + 1))
    params = {**params, "head.w": head, "head.b": head_b}
    views = [(u.view_w if view == "w" else u.view_m, ctc_targets(u, task, view)) for u in data]
    n_batches = sum(len(make_batches(data, max_seconds, seed + e)) for e in range(epochs))
    state = OptimizerState(AdamHyper(lr_peak=lr, warmup_steps=max(1, n_batches // 10),
                                     total_steps=max(1, n_batches), weight_decay=0.0))

    def utt_loss(x, tgt):
        feats = encode(x, enc).data
        return ctc_loss(log_softmax_rows(add_bias(feats @ head, head_b)), tgt)

    def epoch_loss():
        return float(np.mean([utt_loss(x, t).item() for x, t in views]))

    by_id = {u.utt_id: i for i, u in enumerate(data)}
    history = [epoch_loss()]
    best = (history[0], copy.deepcopy(enc))
    for epoch in range(epochs):
        for t in params.values():
            t.requires_grad = True
        for batch in make_batches(data, max_seconds, seed + epoch):
            with GradTape() as tape:
                losses = [utt_loss(*views[by_id[u.utt_id]]) for u in batch]
                loss = scale(add_all(losses), 1.0 / len(losses))
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"CTC loss became {loss.item()} in epoch {epoch}")
            tape.backward(loss)
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            adam_step(params, clip_global_norm(grads, 5.0), state)
        for t in params.values():
            t.requires_grad = False
            t.grad = None
        avg = epoch_loss()
        if not np.isfinite(avg):
            raise DivergenceError(f"CTC loss became {avg} after epoch {epoch}")
        history.append(avg)
        log.info("ctc %s epoch %d loss %.4f", enc.name, epoch + 1, avg)
        if avg < best[0]:
            best = (avg, copy.deepcopy(enc))
        else:
            break
    out = best[1]
    out.ctc_history = history
    return out
