"""Experiment configuration (YAML) with strict key checking.

Grammar: a YAML mapping with the top-level sections below; every section is
optional and falls back to :data:`DEFAULTS`. Unknown keys are rejected with
the dotted path of the offending key.

.. code-block:: yaml

    seed: 0
    fusion: res-gated-bi-caf        # or a list of mechanism keys for a sweep
    baselines: []                   # optional: whisper-only, mhubert-only
    projector: {kind: linear, conv_layers: [[3, 2]], mlp_hidden: 128}
    fusion_attention: {d_model: 64, heads: 4}
    data: {n_train: 300, n_test: 60, noise: 0.5, ood_noise: 0.8, ...}
    encoders:
      whisper: {d_out: 64, layers: 1, heads: 4, ctc_epochs: 3, lora_rank: 4, lora_alpha: 8}
      mhubert: {d_out: 48, layers: 1, heads: 4, ctc_epochs: 3}
    lm: {vocab: 64, d_llm: 96, layers: 2, heads: 4, max_len: 64, pretrain_steps: 400, ...}
    stages:
      - {name: stage1, trainable: [projector, fusion], epochs: 6, peak_lr: 0.003, warmup_steps: 200}
      - {name: stage2, trainable: [projector, fusion, lm_lora], epochs: 6, peak_lr: 0.003, warmup_steps: 200}
    eval: {splits: [valid, test, ood], max_new: 24, ngram: 5}
"""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .data import LANGUAGES
from .fusion import BASELINES, MECHANISMS
from .model import GROUPS

SPLITS = ("valid", "test", "ood")


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "fusion": "dfc",
    "baselines": [],
    "projector": {"kind": "linear", "conv_layers": [[3, 2]], "mlp_hidden": 128,
                  "window": 2, "queries_per_window": 1, "layers": 1, "heads": 4},
    "fusion_attention": {"d_model": 64, "heads": 4},
    "data": {"n_train": 300, "n_test": 60, "valid_fraction": 0.05, "noise": 0.5, "ood_noise": 0.8,
             "n_labels": 4, "d_raw": 16, "frames_per_token": 2, "frame_seconds": 2.0,
             "min_tokens": 3, "max_tokens": 12, "task_seed": 1234, "langs": list(LANGUAGES)},
    "encoders": {
        "whisper": {"d_out": 64, "layers": 1, "heads": 4, "ctc_epochs": 3, "ctc_lr": 3e-3,
                    "lora_rank": 4, "lora_alpha": 8.0},
        "mhubert": {"d_out": 48, "layers": 1, "heads": 4, "ctc_epochs": 3, "ctc_lr": 3e-3,
                    "lora_rank": 0, "lora_alpha": 8.0},
    },
    "lm": {"vocab": 64, "d_llm": 96, "layers": 2, "heads": 4, "max_len": 64, "pretrain_steps": 400,
           "pretrain_batch": 8, "pretrain_lr": 3e-3, "lora_rank": 4, "lora_alpha": 8.0},
    "stages": [
        {"name": "stage1", "trainable": ["projector", "fusion"], "epochs": 6, "peak_lr": 3e-3,
         "warmup_steps": 200, "weight_decay": 0.01, "clip_norm": 5.0, "max_seconds": 120.0},
        {"name": "stage2", "trainable": ["projector", "fusion", "lm_lora"], "epochs": 6, "peak_lr": 3e-3,
         "warmup_steps": 200, "weight_decay": 0.01, "clip_norm": 5.0, "max_seconds": 120.0},
    ],
    "eval": {"splits": ["valid", "test", "ood"], "max_new": 24, "ngram": 5},
}

QUICK = {"data": {"n_train": 120, "n_test": 24}, "lm": {"pretrain_steps": 300},
         "encoders": {"whisper": {"ctc_epochs": 1}, "mhubert": {"ctc_epochs": 1}},
         "stage_epochs": 2, "stage_warmup": 40}


def _merge(base: dict, over: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and key not in ("stages",):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{where}' must be a mapping")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


def _stage(raw: Any, i: int) -> dict:
    where = f"stages[{i}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"config key '{where}' must be a mapping")
    template = DEFAULTS["stages"][min(i, 1)]
    merged = _merge({**template, "name": f"stage{i + 1}"}, raw, where)
    groups = merged["trainable"]
    if not isinstance(groups, list) or any(g not in GROUPS for g in groups):
        raise ConfigError(f"config key '{where}.trainable' must list groups from {', '.join(GROUPS)}")
    return merged


def resolve(raw: dict | None, quick: bool = False, seed: int | None = None) -> dict:
    """Merge ``raw`` over the defaults and validate; returns a plain dict."""
    raw = dict(raw or {})
    stages = raw.pop("stages", None)
    cfg = _merge(DEFAULTS, raw, "")
    cfg["stages"] = DEFAULTS["stages"] if stages is None else stages
    if not isinstance(cfg["stages"], list) or not cfg["stages"]:
        raise ConfigError("config key 'stages' must be a non-empty list")
    cfg["stages"] = [_stage(s, i) for i, s in enumerate(cfg["stages"])]
    if seed is not None:
        cfg["seed"] = int(seed)
    if quick:
        cfg["data"].update(QUICK["data"])
        cfg["lm"].update(QUICK["lm"])
        for name, opts in QUICK["encoders"].items():
            cfg["encoders"][name].update(opts)
        for st in cfg["stages"]:
            st["epochs"] = min(st["epochs"], QUICK["stage_epochs"])
            st["warmup_steps"] = min(st["warmup_steps"], QUICK["stage_warmup"])
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    fusion = cfg["fusion"]
    mechs = fusion if isinstance(fusion, list) else [fusion]
    if not mechs:
        raise ConfigError("config key 'fusion' must name at least one mechanism")
    for m in mechs:
        if m not in MECHANISMS:
            raise ConfigError(f"config key 'fusion': unknown mechanism {m!r} (choose from {', '.join(MECHANISMS)})")
    for b in cfg["baselines"]:
        if b not in BASELINES:
            raise ConfigError(f"config key 'baselines': unknown baseline {b!r}")
    if cfg["projector"]["kind"] not in ("linear", "qformer"):
        raise ConfigError(f"config key 'projector.kind': unknown projector {cfg['projector']['kind']!r}")
    for s in cfg["eval"]["splits"]:
        if s not in SPLITS:
            raise ConfigError(f"config key 'eval.splits': unknown split {s!r}")
    bad = set(cfg["data"]["langs"]) - set(LANGUAGES)
    if bad or not cfg["data"]["langs"]:
        raise ConfigError(f"config key 'data.langs': unsupported languages {sorted(bad)}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("config key 'seed' must be an integer")
    names = [s["name"] for s in cfg["stages"]]
    if len(set(names)) != len(names):
        raise ConfigError("config key 'stages': stage names must be unique")


def mechanisms(cfg: dict) -> list[str]:
    fusion = cfg["fusion"]
    return (list(fusion) if isinstance(fusion, list) else [fusion]) + list(cfg["baselines"])


def load_config(path: str | Path, quick: bool = False, seed: int | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    return resolve(raw, quick=quick, seed=seed)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)
