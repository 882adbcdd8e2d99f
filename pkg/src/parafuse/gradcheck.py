"""Finite-difference verification of every trainable operation.

Each check builds a tiny random instance from a seed, reduces the output to
a scalar with a fixed random projection, and compares the tape gradient of
every parameter with central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .adapters import init_lora, lora_forward
from .attention import cross_attention, init_attention
from .decoder import attach_lora as attach_lm_lora, init_decoder, lm_forward, lm_tensors
from .encoders import attach_lora as attach_encoder_lora, encode, encoder_tensors, init_encoder
from .fusion import MECHANISMS, fuse, init_fusion, FusionParams
from .losses import CtcTarget, cross_entropy, ctc_loss
from .model import _collect
from .projectors import (LinearProjectorConfig, QFormerConfig, init_linear_projector, init_qformer,
                         linear_projector, qformer_projector)
from .tensor import (GradTape, Tensor, concat_features, finite_diff_grad, log_softmax_rows, matmul, mul,
                     relative_error, sigmoid, softmax_rows)

EPS = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _coords(size: int, rng: np.random.Generator, limit: int):
    if size <= limit:
        return None
    return rng.choice(size, size=limit, replace=False)


def check_tensors(loss_fn: Callable[[], Tensor], tensors: dict[str, Tensor], seed: int,
                  limit: int = 6) -> float:
    """Largest relative error over ``tensors`` (at most ``limit`` sampled coordinates each)."""
    rng = np.random.default_rng(seed + 7919)
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}
    for t in tensors.values():
        t.requires_grad = False
    worst = 0.0
    for name, t in tensors.items():
        original = t.data

        def f(x, t=t):
            t.data = x.data
            return loss_fn()

        numeric = finite_diff_grad(f, original.copy(), EPS, _coords(original.size, rng, limit))
        t.data = original
        worst = max(worst, relative_error(analytic[name], numeric))
    return worst


def _proj_sum(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.normal(size=out.shape))
    return lambda y: mul(y, r).sum()


def _scalarize(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    reduce = _proj_sum(fn(), rng)
    return lambda: reduce(fn())


def _rand(rng, *shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape))


def check_primitives(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b, c = _rand(rng, 3, 4), _rand(rng, 4, 5), _rand(rng, 3, 2)

    def fn():
        h = softmax_rows(matmul(a, b))
        return log_softmax_rows(concat_features(sigmoid(h), c))

    return check_tensors(_scalarize(fn, rng), {"a": a, "b": b, "c": c}, seed)


def check_attention(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = init_attention(6, 5, 8, 2, seed)
    q, kv = _rand(rng, 3, 6), _rand(rng, 4, 5)
    tensors = {"w_q": p.w_q, "w_k": p.w_k, "w_v": p.w_v, "w_o": p.w_o, "q": q, "kv": kv}
    return check_tensors(_scalarize(lambda: cross_attention(q, kv, p), rng), tensors, seed)


def check_fusion(mechanism: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = FusionParams("dfc") if mechanism == "dfc" else init_fusion(mechanism, 6, 4, 4, 2, seed)
    hw, hm = _rand(rng, 3, 6), _rand(rng, 3, 4)
    tensors = {"hw": hw, "hm": hm, **_collect(p, "fusion")}
    return check_tensors(_scalarize(lambda: fuse(mechanism, hw, hm, p), rng), tensors, seed)


def check_linear_projector(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cfg = LinearProjectorConfig(conv_layers=[(3, 2), (2, 1)], mlp_hidden=6, d_in=4, d_llm=5)
    p = init_linear_projector(cfg, seed)
    for b in p.conv_b:
        b.data = rng.normal(size=b.shape)
    x = _rand(rng, 9, 4)
    tensors = {"x": x, **_collect(p, "proj")}
    return check_tensors(_scalarize(lambda: linear_projector(x, cfg, p), rng), tensors, seed)


def check_qformer(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cfg = QFormerConfig(window=3, queries_per_window=2, layers=2, heads=2, d_in=4, d_llm=6, mlp_hidden=5)
    p = init_qformer(cfg, seed)
    x = _rand(rng, 7, 4)
    tensors = {"x": x, **_collect(p, "qformer")}
    return check_tensors(_scalarize(lambda: qformer_projector(x, cfg, p), rng), tensors, seed)


def check_lora(seed: int) -> float:
    rng = np.random.default_rng(seed)
    ad = init_lora(5, 4, rank=2, alpha=4.0, seed=seed)
    ad.b.data = rng.normal(size=ad.b.shape)
    base = _rand(rng, 4, 5)
    x = _rand(rng, 3, 5)
    tensors = {"x": x, "a": ad.a, "b": ad.b}
    return check_tensors(_scalarize(lambda: lora_forward(x, base, ad), rng), tensors, seed)


def check_ctc(seed: int) -> float:
    rng = np.random.default_rng(seed)
    v = int(rng.integers(2, 5))
    n = int(rng.integers(1, 4))
    tokens = tuple(int(t) for t in rng.integers(1, v, size=n))
    target = CtcTarget(tokens)
    t_len = target.min_frames() + int(rng.integers(0, 3))
    logits = _rand(rng, t_len, v)
    return check_tensors(lambda: ctc_loss(log_softmax_rows(logits), target), {"logits": logits}, seed)


def check_cross_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    logits = _rand(rng, 5, 7)
    targets = rng.integers(0, 7, size=5)
    return check_tensors(lambda: cross_entropy(logits, targets), {"logits": logits}, seed)


def _perturb_lora(slots, rng) -> None:
    for ad in slots:
        ad.b.data = rng.normal(0, 0.5, size=ad.b.shape)


def check_decoder(seed: int) -> float:
    """Base weights without adapters, then adapters (plus the speech prefix) on top."""
    rng = np.random.default_rng(seed)
    lm = init_decoder(vocab=7, d_llm=8, layers=2, heads=2, max_len=12, seed=seed)
    speech = _rand(rng, 3, 8)
    text, targets = [0, 4, 5, 3], [4, 5, 3, 1]

    def loss(model):
        return lambda: cross_entropy(lm_forward(speech, text, model), targets)

    base = check_tensors(loss(lm), {"speech": speech, **lm_tensors(lm)}, seed, limit=4)
    tuned = attach_lm_lora(lm, rank=2, alpha=4.0, seed=seed)
    _perturb_lora([ad for lyr in tuned.layers for ad in (lyr.lora_q, lyr.lora_v)], rng)
    adapted = check_tensors(loss(tuned), {"speech": speech, **lm_tensors(tuned, lora=True)}, seed, limit=4)
    return max(base, adapted)


def check_encoder(seed: int) -> float:
    rng = np.random.default_rng(seed)
    enc = init_encoder("enc", 3, 4, layers=1, heads=2, seed=seed)
    x = _rand(rng, 5, 3)
    base = check_tensors(_scalarize(lambda: encode(x, enc).data, rng), encoder_tensors(enc), seed, limit=4)
    tuned = attach_encoder_lora(enc, rank=2, alpha=4.0, seed=seed)
    _perturb_lora([ad for blk in tuned.blocks for ad in (blk.lora_q, blk.lora_v)], rng)
    adapted = check_tensors(_scalarize(lambda: encode(x, tuned).data, rng),
                            encoder_tensors(tuned, lora=True), seed, limit=4)
    return max(base, adapted)


def suite() -> dict[str, Callable[[int], float]]:
    checks: dict[str, Callable[[int], float]] = {
        "primitives": check_primitives,
        "attention": check_attention,
        "linear-projector": check_linear_projector,
        "qformer-projector": check_qformer,
        "lora": check_lora,
        "ctc": check_ctc,
        "cross-entropy": check_cross_entropy,
        "decoder-lm": check_decoder,
        "encoder": check_encoder,
    }
    for mech in MECHANISMS:
        checks[f"fusion:{mech}"] = lambda s, m=mech: check_fusion(m, s)
    return checks


def run_suite(n_seeds: int = 20, names: list[str] | None = None) -> tuple[list[CheckResult], float]:
    """Run every check over ``n_seeds`` seeds. Returns results and elapsed seconds."""
    start = time.perf_counter()
    results = []
    for name, fn in suite().items():
        if names and name not in names:
            continue
        for seed in range(n_seeds):
            results.append(CheckResult(name, seed, fn(seed)))
    return results, time.perf_counter() - start
