"""Fusion of two parallel encoder streams into one sequence.

Five mechanisms are provided, selected by string key:

=========================  =====================================================
``dfc``                    concatenate the two streams frame by frame
``res-uni-caf``            whisper queries mhubert, residual onto whisper
``res-bi-caf``             both directions, residual, concatenated
``res-gated-bi-caf``       as above with a sigmoid gate on the attended path
``res-gated-bi-caf-dfc``   concatenation of ``dfc`` and ``res-gated-bi-caf``
=========================  =====================================================

Two single-stream baselines (``whisper-only``, ``mhubert-only``) pass one
stream through untouched; they exist so experiments can measure what fusion
adds over either encoder alone.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, cross_attention, init_attention, uniform_init
from .tensor import ShapeError, Tensor, concat_features, mul, sigmoid, slice_rows


class Mechanism(str, enum.Enum):
    DFC = "dfc"
    RES_UNI_CAF = "res-uni-caf"
    RES_BI_CAF = "res-bi-caf"
    RES_GATED_BI_CAF = "res-gated-bi-caf"
    RES_GATED_BI_CAF_DFC = "res-gated-bi-caf-dfc"


MECHANISMS = tuple(m.value for m in Mechanism)
BASELINES = ("whisper-only", "mhubert-only")


class MissingParameterError(ValueError):
    pass


@dataclass
class FusionParams:
    mechanism: Mechanism
    attn_wm: AttentionParams | None = None
    attn_mw: AttentionParams | None = None
    gate_wm: Tensor | None = None
    gate_mw: Tensor | None = None

    def __post_init__(self):
        self.mechanism = Mechanism(self.mechanism)
        need = _required(self.mechanism)
        for name in ("attn_wm", "attn_mw", "gate_wm", "gate_mw"):
            present = getattr(self, name) is not None
            if present != (name in need):
                word = "requires" if name in need else "does not use"
                raise MissingParameterError(f"{self.mechanism.value} {word} {name}")


def _required(mech: Mechanism) -> set[str]:
    if mech is Mechanism.DFC:
        return set()
    if mech is Mechanism.RES_UNI_CAF:
        return {"attn_wm"}
    if mech is Mechanism.RES_BI_CAF:
        return {"attn_wm", "attn_mw"}
    return {"attn_wm", "attn_mw", "gate_wm", "gate_mw"}


def init_fusion(mechanism: str, d_w: int, d_m: int, d_model: int = 64, heads: int = 4,
                seed: int = 0) -> FusionParams:
    mech = Mechanism(mechanism)
    need = _required(mech)
    rng = np.random.default_rng(seed)
    sub = rng.integers(0, 2**31, size=2)
    kw = {}
    if "attn_wm" in need:
        kw["attn_wm"] = init_attention(d_w, d_m, d_model, heads, int(sub[0]))
    if "attn_mw" in need:
        kw["attn_mw"] = init_attention(d_m, d_w, d_model, heads, int(sub[1]))
    if "gate_wm" in need:
        kw["gate_wm"] = uniform_init(rng, d_w, d_w)
        kw["gate_mw"] = uniform_init(rng, d_m, d_m)
    return FusionParams(mech, **kw)


def fused_dim(mechanism: str, d_w: int, d_m: int) -> int:
    if mechanism == "whisper-only":
        return d_w
    if mechanism == "mhubert-only":
        return d_m
    mech = Mechanism(mechanism)
    if mech is Mechanism.RES_UNI_CAF:
        return d_w
    if mech is Mechanism.RES_GATED_BI_CAF_DFC:
        return 2 * (d_w + d_m)
    return d_w + d_m


def align_lengths(hw: Tensor, hm: Tensor) -> tuple[Tensor, Tensor]:
    """Truncate both streams to the shorter length."""
    t = min(hw.shape[0], hm.shape[0])
    if hw.shape[0] != t:
        hw = slice_rows(hw, 0, t)
    if hm.shape[0] != t:
        hm = slice_rows(hm, 0, t)
    return hw, hm


def _check_time(hw: Tensor, hm: Tensor) -> None:
    if hw.shape[0] != hm.shape[0]:
        raise ShapeError(f"time lengths differ: whisper T={hw.shape[0]}, mhubert T={hm.shape[0]}")


def _expect(p: FusionParams, mech: Mechanism) -> None:
    if p is None or p.mechanism is not mech:
        got = None if p is None else p.mechanism.value
        raise MissingParameterError(f"expected parameters for {mech.value}, got {got}")


def fuse_dfc(hw: Tensor, hm: Tensor) -> Tensor:
    _check_time(hw, hm)
    return concat_features(hw, hm)


def fuse_res_uni_caf(hw: Tensor, hm: Tensor, p: FusionParams) -> Tensor:
    _expect(p, Mechanism.RES_UNI_CAF)
    _check_time(hw, hm)
    return cross_attention(hw, hm, p.attn_wm) + hw


def _bi_attended(hw: Tensor, hm: Tensor, p: FusionParams) -> tuple[Tensor, Tensor]:
    return cross_attention(hw, hm, p.attn_wm), cross_attention(hm, hw, p.attn_mw)


def fuse_res_bi_caf(hw: Tensor, hm: Tensor, p: FusionParams) -> Tensor:
    _expect(p, Mechanism.RES_BI_CAF)
    _check_time(hw, hm)
    a_wm, a_mw = _bi_attended(hw, hm, p)
    return concat_features(a_wm + hw, a_mw + hm)


def _gated(hw: Tensor, hm: Tensor, p: FusionParams) -> Tensor:
    a_wm, a_mw = _bi_attended(hw, hm, p)
    # gate acts on the feature axis of each frame: sigma(h W_g)
    gw = mul(sigmoid(a_wm @ p.gate_wm), a_wm) + hw
    gm = mul(sigmoid(a_mw @ p.gate_mw), a_mw) + hm
    return concat_features(gw, gm)


def fuse_res_gated_bi_caf(hw: Tensor, hm: Tensor, p: FusionParams) -> Tensor:
    _expect(p, Mechanism.RES_GATED_BI_CAF)
    _check_time(hw, hm)
    return _gated(hw, hm, p)


def fuse_res_gated_bi_caf_dfc(hw: Tensor, hm: Tensor, p: FusionParams) -> Tensor:
    _expect(p, Mechanism.RES_GATED_BI_CAF_DFC)
    _check_time(hw, hm)
    return concat_features(concat_features(hw, hm), _gated(hw, hm, p))


def fuse(mechanism: str, hw: Tensor, hm: Tensor, p: FusionParams | None) -> Tensor:
    """Dispatch on a mechanism key. Lengths are aligned first."""
    hw, hm = align_lengths(hw, hm)
    if mechanism == "whisper-only":
        return hw
    if mechanism == "mhubert-only":
        return hm
    mech = Mechanism(mechanism)
    if mech is Mechanism.DFC:
        return fuse_dfc(hw, hm)
    if mech is Mechanism.RES_UNI_CAF:
        return fuse_res_uni_caf(hw, hm, p)
    if mech is Mechanism.RES_BI_CAF:
        return fuse_res_bi_caf(hw, hm, p)
    if mech is Mechanism.RES_GATED_BI_CAF:
        return fuse_res_gated_bi_caf(hw, hm, p)
    return fuse_res_gated_bi_caf_dfc(hw, hm, p)
