"""Low-rank adapters on frozen linear maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, scale, transpose


@dataclass
class LoraAdapter:
    a: Tensor  # r x d_in
    b: Tensor  # d_out x r
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def init_lora(d_in: int, d_out: int, rank: int = 4, alpha: float = 8.0, seed: int = 0) -> LoraAdapter:
    """``b`` starts at zero so the adapter is an exact no-op until trained."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d_in)
    return LoraAdapter(
        a=Tensor(rng.uniform(-bound, bound, size=(rank, d_in))),
        b=Tensor(np.zeros((d_out, rank))),
        rank=rank,
        alpha=float(alpha),
    )


def _check(base_w: Tensor, ad: LoraAdapter) -> None:
    d_out, d_in = base_w.shape
    if ad.a.shape != (ad.rank, d_in) or ad.b.shape != (d_out, ad.rank):
        raise ShapeError(
            f"LoRA rank/shape mismatch: a {ad.a.shape}, b {ad.b.shape}, rank {ad.rank}, "
            f"base {base_w.shape}")


def lora_forward(x: Tensor, base_w: Tensor, ad: LoraAdapter) -> Tensor:
    """``x @ (base_w + scaling * b @ a).T`` without forming the merged matrix.

    ``base_w`` is treated as a constant: it never receives a gradient.
    """
    _check(base_w, ad)
    if x.shape[-1] != base_w.shape[1]:
        raise ShapeError(f"lora_forward: input dim {x.shape[-1]} vs base {base_w.shape}")
    frozen = Tensor(base_w.data.T)
    low = (x @ transpose(ad.a)) @ transpose(ad.b)
    return x @ frozen + scale(low, ad.scaling)


def lora_merge(base_w: Tensor, ad: LoraAdapter) -> Tensor:
    _check(base_w, ad)
    return Tensor(base_w.data + ad.scaling * (ad.b.data @ ad.a.data))
