"""Tiny causal decoder LM that reads projected speech as a prefix.

Sequence layout fed to the transformer::

    [speech_0 .. speech_{S-1}] [SEP] [text_0 .. text_{L-1}]

Speech frame ``s`` and text token ``j`` receive positional embeddings ``s``
and ``j`` respectively (the boundary token gets none), plus a learned
segment vector on speech frames. Logits are returned for text positions only.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapters import LoraAdapter, init_lora, lora_forward
from .attention import attend
from .losses import cross_entropy
from .optim import AdamHyper, OptimizerState, adam_step, clip_global_norm
from .tensor import (GradTape, ShapeError, Tensor, add_all, add_bias, concat, gelu, layer_norm, scale,
                     slice_rows, take_rows, transpose)

log = logging.getLogger(__name__)

BOS, EOS, SEP = 0, 1, 2
N_SPECIAL = 3
_NEG = -1e9


class ContextOverflowError(ValueError):
    pass


@dataclass
class DecoderLayer:
    ln1_g: Tensor
    ln1_b: Tensor
    w_q: Tensor  # d x d, applied as x @ w.T
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor  # d x 4d, applied as x @ w
    b1: Tensor
    w2: Tensor
    b2: Tensor
    lora_q: LoraAdapter | None = None
    lora_v: LoraAdapter | None = None


@dataclass
class DecoderLM:
    vocab: int
    d_llm: int
    heads: int
    max_len: int
    tok_emb: Tensor
    pos_emb: Tensor
    speech_seg: Tensor
    layers: list[DecoderLayer]
    lnf_g: Tensor
    lnf_b: Tensor
    w_out: Tensor  # d x vocab
    b_out: Tensor
    history: list[float] = field(default_factory=list)


def label_to_token(label: int) -> int:
    return label + N_SPECIAL


def token_to_label(token: int) -> int:
    return token - N_SPECIAL


def init_decoder(vocab: int = 64, d_llm: int = 96, layers: int = 2, heads: int = 4, max_len: int = 64,
                 seed: int = 0) -> DecoderLM:
    if d_llm % heads:
        raise ValueError(f"d_llm={d_llm} is not divisible by heads={heads}")
    rng = np.random.default_rng(seed)
    std = 0.02

    def w(*shape, s=std):
        return Tensor(rng.normal(0.0, s, size=shape))

    out_std = std / np.sqrt(2 * layers)
    # attention maps start at 1/sqrt(d): with 0.02 the copy task sits on a long plateau
    att_std = 1.0 / np.sqrt(d_llm)
    lyrs = []
    for _ in range(layers):
        lyrs.append(DecoderLayer(
            ln1_g=Tensor(np.ones(d_llm)), ln1_b=Tensor(np.zeros(d_llm)),
            w_q=w(d_llm, d_llm, s=att_std), w_k=w(d_llm, d_llm, s=att_std), w_v=w(d_llm, d_llm, s=att_std),
            w_o=w(d_llm, d_llm, s=att_std),
            ln2_g=Tensor(np.ones(d_llm)), ln2_b=Tensor(np.zeros(d_llm)),
            w1=w(d_llm, 4 * d_llm), b1=Tensor(np.zeros(4 * d_llm)),
            w2=w(4 * d_llm, d_llm, s=out_std), b2=Tensor(np.zeros(d_llm)),
        ))
    return DecoderLM(
        vocab=vocab, d_llm=d_llm, heads=heads, max_len=max_len,
        tok_emb=w(vocab, d_llm, s=1.0), pos_emb=w(max_len, d_llm, s=1.0), speech_seg=w(d_llm, s=1.0),
        layers=lyrs, lnf_g=Tensor(np.ones(d_llm)), lnf_b=Tensor(np.zeros(d_llm)),
        w_out=w(d_llm, vocab), b_out=Tensor(np.zeros(vocab)),
    )


def attach_lora(lm: DecoderLM, rank: int = 4, alpha: float = 8.0, seed: int = 0) -> DecoderLM:
    """Return a copy with zero-initialised q/v adapters; the copy's output is unchanged."""
    lm = copy.deepcopy(lm)
    rng = np.random.default_rng(seed)
    for lyr in lm.layers:
        lyr.lora_q = init_lora(lm.d_llm, lm.d_llm, rank, alpha, int(rng.integers(2**31)))
        lyr.lora_v = init_lora(lm.d_llm, lm.d_llm, rank, alpha, int(rng.integers(2**31)))
    return lm


def lm_tensors(lm: DecoderLM, lora: bool = False) -> dict[str, Tensor]:
    out = {}
    if not lora:
        for f in ("tok_emb", "pos_emb", "speech_seg", "lnf_g", "lnf_b", "w_out", "b_out"):
            out[f] = getattr(lm, f)
    for i, lyr in enumerate(lm.layers):
        if lora:
            for slot in ("lora_q", "lora_v"):
                ad = getattr(lyr, slot)
                if ad is not None:
                    out[f"layers.{i}.{slot}.a"] = ad.a
                    out[f"layers.{i}.{slot}.b"] = ad.b
        else:
            for f in ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
                out[f"layers.{i}.{f}"] = getattr(lyr, f)
    return out


def _proj(x: Tensor, w: Tensor, ad: LoraAdapter | None) -> Tensor:
    return x @ transpose(w) if ad is None else lora_forward(x, w, ad)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), _NEG), k=1)


def _embed(lm: DecoderLM, speech: Tensor | None, text_tokens: Sequence[int]) -> Tensor:
    parts = []
    if speech is not None and speech.shape[0]:
        s = speech.shape[0]
        pe = slice_rows(lm.pos_emb, 0, s)
        parts.append(add_bias(speech + pe, lm.speech_seg))
    sep = take_rows(lm.tok_emb, [SEP])
    parts.append(sep)
    if len(text_tokens):
        tok = take_rows(lm.tok_emb, list(text_tokens))
        parts.append(tok + slice_rows(lm.pos_emb, 0, len(text_tokens)))
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def lm_forward(speech_embeds: Tensor | None, text_tokens: Sequence[int], lm: DecoderLM) -> Tensor:
    """Logits (``len(text_tokens) x vocab``) for every text position."""
    s = 0 if speech_embeds is None else speech_embeds.shape[0]
    if speech_embeds is not None and s and speech_embeds.shape[1] != lm.d_llm:
        raise ShapeError(f"speech embeddings have dim {speech_embeds.shape[1]}, LM expects {lm.d_llm}")
    if s + len(text_tokens) > lm.max_len:
        raise ContextOverflowError(
            f"{s} speech frames + {len(text_tokens)} text tokens exceed max_len={lm.max_len}")
    if any(t < 0 or t >= lm.vocab for t in text_tokens):
        raise IndexError(f"text token outside vocabulary of {lm.vocab}")
    h = _embed(lm, speech_embeds, text_tokens)
    mask = causal_mask(h.shape[0])
    for lyr in lm.layers:
        x = layer_norm(h, lyr.ln1_g, lyr.ln1_b)
        q = _proj(x, lyr.w_q, lyr.lora_q)
        k = x @ transpose(lyr.w_k)
        v = _proj(x, lyr.w_v, lyr.lora_v)
        h = h + attend(q, k, v, lm.heads, mask) @ transpose(lyr.w_o)
        x = layer_norm(h, lyr.ln2_g, lyr.ln2_b)
        h = h + add_bias(gelu(add_bias(x @ lyr.w1, lyr.b1)) @ lyr.w2, lyr.b2)
    text = slice_rows(h, s + 1, h.shape[0])
    return add_bias(layer_norm(text, lm.lnf_g, lm.lnf_b) @ lm.w_out, lm.b_out)


def greedy_decode(speech_embeds: Tensor | None, lm: DecoderLM, max_new: int = 16) -> list[int]:
    """Argmax decoding from BOS until EOS or ``max_new`` tokens. Ties go to the lowest id."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    s = 0 if speech_embeds is None else speech_embeds.shape[0]
    budget = min(max_new, lm.max_len - s)
    text = [BOS]
    out: list[int] = []
    for _ in range(max(budget, 0)):
        logits = lm_forward(speech_embeds, text, lm).data[-1]
        nxt = int(np.argmax(logits))
        if nxt == EOS:
            break
        out.append(nxt)
        text.append(nxt)
    return out


def sequence_loss(speech_embeds: Tensor | None, tokens: Sequence[int], lm: DecoderLM) -> Tensor:
    """Teacher-forced cross-entropy of ``tokens`` followed by EOS."""
    logits = lm_forward(speech_embeds, [BOS, *tokens], lm)
    return cross_entropy(logits, [*tokens, EOS])


def pretrain_lm(lm: DecoderLM, steps: int = 1500, batch: int = 8, lr: float = 3e-3, seed: int = 0,
                min_len: int = 3, max_len: int = 12, noise: float = 0.3) -> DecoderLM:
    """Teach a fresh LM to transcribe a prefix of (noisy) token embeddings.

    This is the toy analogue of a pretrained LLM: it already knows how to read
    its own embedding space, so a projector only has to map speech into it.
    Returns a trained copy; ``history`` holds the mean loss per 100 steps.
    """
    lm = copy.deepcopy(lm)
    params = lm_tensors(lm)
    rng = np.random.default_rng(seed)
    state = OptimizerState(AdamHyper(lr_peak=lr, warmup_steps=max(1, steps // 20), total_steps=steps,
                                     weight_decay=0.01))
    labels = np.arange(N_SPECIAL, lm.vocab)
    for t in params.values():
        t.requires_grad = True
    window = []
    for step in range(steps):
        with GradTape() as tape:
            losses = []
            for _ in range(batch):
                n = int(rng.integers(min_len, max_len + 1))
                toks = [int(x) for x in rng.choice(labels, size=n)]
                prefix = take_rows(lm.tok_emb, toks)
                jitter = Tensor(rng.normal(0.0, noise, size=prefix.shape))
                losses.append(sequence_loss(prefix + jitter, toks, lm))
            loss = scale(add_all(losses), 1.0 / batch)
        tape.backward(loss)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        adam_step(params, clip_global_norm(grads, 5.0), state)
        window.append(loss.item())
        if len(window) == 100:
            lm.history.append(float(np.mean(window)))
            log.info("lm pretrain step %d loss %.4f", step + 1, lm.history[-1])
            window = []
    for t in params.values():
        t.requires_grad = False
        t.grad = None
    return lm


def remove_ngram_repetitions(tokens: Sequence, n: int = 5) -> list:
    """Drop ``n``-token blocks that repeat the material just before them.

    Scanning left to right, the block ``tokens[i:i+n]`` is deleted when it
    equals the ``n`` tokens starting ``p`` positions earlier for some lag
    ``1 <= p <= n``; ``p == n`` is the plain "block repeats the previous
    block" case, smaller lags catch runs with a shorter period. Scans repeat
    until nothing changes, so the result is a fixpoint. The leftmost match is
    always removed first.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = list(tokens)
    changed = True
    while changed:
        changed = False
        i = 1
        while i + n <= len(out):
            block = out[i:i + n]
            if any(out[i - p:i - p + n] == block for p in range(1, min(n, i) + 1)):
                del out[i:i + n]
                changed = True
                # a new match can only start within n positions of the cut
                i = max(1, i - n)
            else:
                i += 1
    return out
