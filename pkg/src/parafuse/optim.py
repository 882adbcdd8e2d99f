"""Adam with decoupled weight decay, warmup/linear-decay schedule, clipping, batching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


class OversizedUtteranceError(ValueError):
    pass


@dataclass
class AdamHyper:
    lr_peak: float = 1e-4
    warmup_steps: int = 200
    total_steps: int = 1000
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class OptimizerState:
    hyper: AdamHyper
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at(step: int, hyper: AdamHyper) -> float:
    """Linear ramp to ``lr_peak`` at ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    w, total, peak = hyper.warmup_steps, hyper.total_steps, hyper.lr_peak
    if step <= 0:
        return 0.0
    if step <= w:
        return peak * step / w
    if step >= total:
        return 0.0
    return peak * (total - step) / (total - w)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float = 5.0) -> dict[str, np.ndarray]:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
              decay: Mapping[str, bool] | None = None) -> OptimizerState:
    """One bias-corrected Adam update with decoupled weight decay, in place on ``params``.

    By default matrices decay and vectors (gains, biases) do not.
    """
    h = state.hyper
    b1, b2 = h.betas
    state.step += 1
    lr = lr_at(state.step, h)
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + h.eps)
        wants_decay = p.ndim >= 2 if decay is None else decay.get(name, p.ndim >= 2)
        new = p.data - lr * update
        if wants_decay and h.weight_decay:
            new = new - lr * h.weight_decay * p.data
        p.data = new
    return state


def make_batches(items: Sequence, max_seconds: float = 120.0, seed: int = 0) -> list[list]:
    """Shuffle, then greedily pack items (anything with ``duration_s``) under a duration budget."""
    for it in items:
        if it.duration_s > max_seconds:
            raise OversizedUtteranceError(
                f"{getattr(it, 'utt_id', it)} lasts {it.duration_s}s > batch budget {max_seconds}s")
    order = np.random.default_rng(seed).permutation(len(items))
    batches, cur, used = [], [], 0.0
    for i in order:
        it = items[int(i)]
        if cur and used + it.duration_s > max_seconds:
            batches.append(cur)
            cur, used = [], 0.0
        cur.append(it)
        used += it.duration_s
    if cur:
        batches.append(cur)
    return batches
