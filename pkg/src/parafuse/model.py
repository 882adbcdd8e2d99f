"""The assembled parallel-encoder Speech-LLM and its named parameter groups."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .data import SyntheticUtterance
from .decoder import DecoderLM, greedy_decode, label_to_token, lm_tensors, sequence_loss, token_to_label, N_SPECIAL
from .encoders import ToyEncoder, encode, encoder_tensors
from .fusion import BASELINES, MECHANISMS, FusionParams, fuse, fused_dim, init_fusion
from .projectors import (LinearProjectorConfig, LinearProjectorParams, QFormerConfig, QFormerParams,
                         init_linear_projector, init_qformer, linear_projector, qformer_projector)
from .tensor import Tensor

GROUPS = ("projector", "fusion", "lm", "lm_lora", "encoder", "encoder_lora")


@dataclass
class SpeechLLM:
    enc_w: ToyEncoder
    enc_m: ToyEncoder
    mechanism: str
    fusion: FusionParams | None
    projector_kind: str
    projector_cfg: LinearProjectorConfig | QFormerConfig
    projector: LinearProjectorParams | QFormerParams
    lm: DecoderLM
    _feature_cache: dict = field(default_factory=dict, repr=False)
    _encoders_frozen: bool = field(default=True, repr=False)

    def named_groups(self) -> dict[str, dict[str, Tensor]]:
        groups = {
            "projector": _collect(self.projector, "projector"),
            "fusion": _collect(self.fusion, "fusion") if self.fusion is not None else {},
            "lm": {f"lm.{k}": v for k, v in lm_tensors(self.lm).items()},
            "lm_lora": {f"lm.{k}": v for k, v in lm_tensors(self.lm, lora=True).items()},
            "encoder": {},
            "encoder_lora": {},
        }
        for tag, enc in (("enc_w", self.enc_w), ("enc_m", self.enc_m)):
            groups["encoder"].update({f"{tag}.{k}": v for k, v in encoder_tensors(enc).items()})
            groups["encoder_lora"].update({f"{tag}.{k}": v for k, v in encoder_tensors(enc, lora=True).items()})
        return groups

    def named_parameters(self) -> dict[str, tuple[str, Tensor]]:
        return {name: (grp, t) for grp, items in self.named_groups().items() for name, t in items.items()}

    def set_trainable(self, groups) -> dict[str, Tensor]:
        """Flag exactly the tensors of ``groups`` as trainable; returns them by name."""
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        live = {}
        for grp, items in self.named_groups().items():
            for name, t in items.items():
                t.requires_grad = grp in groups
                t.grad = None
                if t.requires_grad:
                    live[name] = t
        self._encoders_frozen = not {"encoder", "encoder_lora"} & set(groups)
        self._feature_cache.clear()
        return live

    def encoder_features(self, utt: SyntheticUtterance) -> tuple[Tensor, Tensor]:
        """Encoder outputs; memoised while encoders are frozen."""
        key = utt.utt_id
        frozen = self._encoders_frozen
        if frozen and key in self._feature_cache:
            return self._feature_cache[key]
        hw = encode(utt.view_w, self.enc_w).data
        hm = encode(utt.view_m, self.enc_m).data
        if frozen:
            self._feature_cache[key] = (hw, hm)
        return hw, hm

    def speech_embeddings(self, hw: Tensor, hm: Tensor) -> Tensor:
        fused = fuse(self.mechanism, hw, hm, self.fusion)
        if self.projector_kind == "linear":
            return linear_projector(fused, self.projector_cfg, self.projector)
        return qformer_projector(fused, self.projector_cfg, self.projector)

    def utterance_loss(self, utt: SyntheticUtterance) -> Tensor:
        hw, hm = self.encoder_features(utt)
        speech = self.speech_embeddings(hw, hm)
        return sequence_loss(speech, [label_to_token(t) for t in utt.tokens], self.lm)

    def transcribe(self, utt: SyntheticUtterance, max_new: int = 24) -> list[int]:
        """Greedy label sequence; non-label tokens are dropped."""
        hw, hm = self.encoder_features(utt)
        toks = greedy_decode(self.speech_embeddings(hw, hm), self.lm, max_new)
        return [token_to_label(t) for t in toks if t >= N_SPECIAL]


def _collect(obj, prefix: str) -> dict[str, Tensor]:
    """Walk dataclasses / lists and name every Tensor leaf."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(_collect(item, f"{prefix}.{i}"))
    elif hasattr(obj, "__dataclass_fields__"):
        for name in obj.__dataclass_fields__:
            out.update(_collect(getattr(obj, name), f"{prefix}.{name}"))
    return out


def build_model(enc_w: ToyEncoder, enc_m: ToyEncoder, lm: DecoderLM, mechanism: str,
                projector: str = "linear", projector_opts: dict | None = None, fusion_d_model: int = 64,
                fusion_heads: int = 4, seed: int = 0) -> SpeechLLM:
    """Wire fresh fusion and projector parameters to private copies of the given encoders and LM."""
    if mechanism not in MECHANISMS + BASELINES:
        raise ValueError(f"unknown fusion mechanism {mechanism!r}")
    rng = np.random.default_rng(seed)
    fseed, pseed = (int(x) for x in rng.integers(0, 2**31, size=2))
    d_w, d_m = enc_w.d_out, enc_m.d_out
    fusion = None
    if mechanism in MECHANISMS and mechanism != "dfc":
        fusion = init_fusion(mechanism, d_w, d_m, fusion_d_model, fusion_heads, fseed)
    elif mechanism == "dfc":
        fusion = FusionParams("dfc")
    d_in = fused_dim(mechanism, d_w, d_m)
    opts = dict(projector_opts or {})
    if projector == "linear":
        cfg = LinearProjectorConfig(d_in=d_in, d_llm=lm.d_llm, **opts)
        params = init_linear_projector(cfg, pseed)
    elif projector == "qformer":
        cfg = QFormerConfig(d_in=d_in, d_llm=lm.d_llm, **opts)
        params = init_qformer(cfg, pseed)
    else:
        raise ValueError(f"unknown projector {projector!r}")
    enc_w, enc_m, lm = copy.deepcopy(enc_w), copy.deepcopy(enc_m), copy.deepcopy(lm)
    return SpeechLLM(enc_w, enc_m, mechanism, fusion, projector, cfg, params, lm)

