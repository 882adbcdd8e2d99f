"""End-to-end pipeline: data, encoder/LM pre-adaptation, two-stage training, decoding, scoring.

Every artifact lives at a fixed path under the output root::

    data/{train,test,ood}.jsonl, data/meta.yaml
    pretrained/{whisper,mhubert,lm}.ckpt, pretrained/meta.yaml
    runs/<mechanism>/<stage>_epoch<k>.ckpt, metrics.jsonl
    runs/<mechanism>/hyps_<stage>_<split>.jsonl
    runs/<mechanism>/report_<stage>_<split>.{json,txt}, eval_report.json
    comparison.md, comparison.jsonl, manifest.yaml

Each step reuses what earlier steps left on disk and recomputes only what is
missing, so subcommands can be run one at a time or all together.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .config import ConfigError, dump_config, load_config, mechanisms, resolve
from .data import SyntheticUtterance, TaskSpec, generate_dataset, load_dataset, render_text, save_dataset, split_validation
from .decoder import DecoderLM, attach_lora as attach_lm_lora, init_decoder, lm_tensors, pretrain_lm, remove_ngram_repetitions
from .encoders import ToyEncoder, attach_lora as attach_encoder_lora, encoder_tensors, init_encoder, pretrain_ctc_encoder
from .model import SpeechLLM, build_model
from .scoring import aggregate, score_utterance, token_accuracy
from .training import StageConfig, load_checkpoint, load_tensors, run_stage, write_tensors

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
STEPS = ("gen-data", "pretrain-encoders", "train", "decode", "score", "compare")


class MissingReportError(FileNotFoundError):
    pass


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _seeds(seed: int) -> dict[str, int]:
    names = ("train", "test", "ood", "split", "whisper", "mhubert", "lm", "lora", "model", "ctc", "batches")
    vals = np.random.default_rng(seed).integers(0, 2**31 - 1, size=len(names))
    return {n: int(v) for n, v in zip(names, vals)}


def _task(cfg: dict) -> TaskSpec:
    d = cfg["data"]
    return TaskSpec(n_labels=d["n_labels"], d_raw=d["d_raw"], frames_per_token=d["frames_per_token"],
                    frame_seconds=d["frame_seconds"], min_tokens=d["min_tokens"], max_tokens=d["max_tokens"],
                    task_seed=d["task_seed"])


def _check_meta(path: Path, expected: dict, what: str) -> bool:
    """True if ``path`` exists and matches; raises if it exists with other settings."""
    if not path.is_file():
        return False
    stored = yaml.safe_load(path.read_text())
    if stored.get("key") != expected["key"]:
        raise ConfigError(f"{what} under {path.parent} was produced with different settings; "
                          f"use a fresh --out directory")
    return True


# ---------------------------------------------------------------- data

@dataclass
class Splits:
    train: list[SyntheticUtterance]
    valid: list[SyntheticUtterance]
    test: list[SyntheticUtterance]
    ood: list[SyntheticUtterance]

    def get(self, name: str) -> list[SyntheticUtterance]:
        return getattr(self, name)


def prepare_data(cfg: dict, out: Path) -> Splits:
    """Generate the dataset files if absent, then always read them back from disk."""
    d, seeds = cfg["data"], _seeds(cfg["seed"])
    ddir = out / "data"
    key = _digest({"data": d, "seed": cfg["seed"]})
    if not _check_meta(ddir / "meta.yaml", {"key": key}, "dataset"):
        task = _task(cfg)
        ddir.mkdir(parents=True, exist_ok=True)
        save_dataset(generate_dataset(seeds["train"], d["n_train"], d["langs"], task, d["noise"], "train"),
                     ddir / "train.jsonl")
        save_dataset(generate_dataset(seeds["test"], d["n_test"], d["langs"], task, d["noise"], "test"),
                     ddir / "test.jsonl")
        save_dataset(generate_dataset(seeds["ood"], d["n_test"], d["langs"], task, d["ood_noise"], "ood"),
                     ddir / "ood.jsonl")
        (ddir / "meta.yaml").write_text(yaml.safe_dump({"key": key, "data": d, "seed": cfg["seed"]}))
        log.info("wrote dataset to %s", ddir)
    train, valid = split_validation(load_dataset(ddir / "train.jsonl"), d["valid_fraction"], seeds["split"])
    return Splits(train, valid, load_dataset(ddir / "test.jsonl"), load_dataset(ddir / "ood.jsonl"))


# ---------------------------------------------------------------- pretrained components

@dataclass
class Pretrained:
    whisper: ToyEncoder
    mhubert: ToyEncoder
    lm: DecoderLM


def _fresh_encoder(cfg: dict, name: str) -> ToyEncoder:
    e, seeds = cfg["encoders"][name], _seeds(cfg["seed"])
    enc = init_encoder(name, cfg["data"]["d_raw"], e["d_out"], e["layers"], e["heads"], seeds[name])
    if e["lora_rank"] > 0:
        enc = attach_encoder_lora(enc, e["lora_rank"], e["lora_alpha"], seeds["lora"])
    return enc


def _fresh_lm(cfg: dict) -> DecoderLM:
    m = cfg["lm"]
    return init_decoder(m["vocab"], m["d_llm"], m["layers"], m["heads"], m["max_len"], _seeds(cfg["seed"])["lm"])


def _enc_named(enc: ToyEncoder) -> dict:
    return {**{k: ("encoder", t) for k, t in encoder_tensors(enc).items()},
            **{k: ("encoder_lora", t) for k, t in encoder_tensors(enc, lora=True).items()}}


def _lm_named(lm: DecoderLM) -> dict:
    return {**{k: ("lm", t) for k, t in lm_tensors(lm).items()},
            **{k: ("lm_lora", t) for k, t in lm_tensors(lm, lora=True).items()}}


def prepare_pretrained(cfg: dict, out: Path, splits: Splits) -> Pretrained:
    """CTC-adapt both encoders on their own view and pretrain the toy LM; cached under ``pretrained/``.

    The whisper-like encoder is adapted through LoRA adapters, the mhubert-like
    encoder is fine-tuned fully (set ``lora_rank`` to change either). The LM
    gets fresh zero-initialised adapters after pretraining.
    """
    pdir, seeds, task = out / "pretrained", _seeds(cfg["seed"]), _task(cfg)
    key = _digest({k: cfg[k] for k in ("encoders", "lm", "data", "seed")})
    m = cfg["lm"]
    whisper, mhubert = _fresh_encoder(cfg, "whisper"), _fresh_encoder(cfg, "mhubert")
    lm = attach_lm_lora(_fresh_lm(cfg), m["lora_rank"], m["lora_alpha"], seeds["lora"]) if m["lora_rank"] else _fresh_lm(cfg)
    if _check_meta(pdir / "meta.yaml", {"key": key}, "pretrained components"):
        load_tensors(_enc_named(whisper), pdir / "whisper.ckpt")
        load_tensors(_enc_named(mhubert), pdir / "mhubert.ckpt")
        load_tensors(_lm_named(lm), pdir / "lm.ckpt")
        return Pretrained(whisper, mhubert, lm)
    history = {}
    adapted = {}
    for name, enc, view in (("whisper", whisper, "w"), ("mhubert", mhubert, "m")):
        e = cfg["encoders"][name]
        mode = "lora" if e["lora_rank"] > 0 else "all"
        adapted[name] = pretrain_ctc_encoder(enc, splits.train, e["ctc_epochs"], task, view=view, trainable=mode,
                                             lr=e["ctc_lr"], seed=seeds["ctc"])
        history[name] = [float(x) for x in adapted[name].ctc_history]
    base = pretrain_lm(_fresh_lm(cfg), steps=m["pretrain_steps"], batch=m["pretrain_batch"], lr=m["pretrain_lr"],
                       seed=seeds["lm"], max_len=cfg["data"]["max_tokens"])
    history["lm"] = [float(x) for x in base.history]
    lm = attach_lm_lora(base, m["lora_rank"], m["lora_alpha"], seeds["lora"]) if m["lora_rank"] else base
    pdir.mkdir(parents=True, exist_ok=True)
    write_tensors(_enc_named(adapted["whisper"]), pdir / "whisper.ckpt")
    write_tensors(_enc_named(adapted["mhubert"]), pdir / "mhubert.ckpt")
    write_tensors(_lm_named(lm), pdir / "lm.ckpt")
    (pdir / "meta.yaml").write_text(yaml.safe_dump({"key": key, "history": history}))
    return Pretrained(adapted["whisper"], adapted["mhubert"], lm)


# ---------------------------------------------------------------- training

def stage_configs(cfg: dict) -> list[StageConfig]:
    return [StageConfig(s["name"], frozenset(s["trainable"]), s["epochs"], s["peak_lr"], s["warmup_steps"],
                        s["weight_decay"], s["clip_norm"], s["max_seconds"]) for s in cfg["stages"]]


def new_model(cfg: dict, pre: Pretrained, mechanism: str) -> SpeechLLM:
    p = cfg["projector"]
    if p["kind"] == "linear":
        opts = {"conv_layers": [tuple(x) for x in p["conv_layers"]], "mlp_hidden": p["mlp_hidden"]}
    else:
        opts = {k: p[k] for k in ("window", "queries_per_window", "layers", "heads", "mlp_hidden")}
    fa = cfg["fusion_attention"]
    return build_model(pre.whisper, pre.mhubert, pre.lm, mechanism, p["kind"], opts, fa["d_model"], fa["heads"],
                       _seeds(cfg["seed"])["model"])


def _final_ckpt(run_dir: Path, stage: dict) -> Path:
    return run_dir / f"{stage['name']}_epoch{stage['epochs']}.ckpt"


def train_mechanism(cfg: dict, pre: Pretrained, splits: Splits, mechanism: str, out: Path) -> list[dict]:
    """Run every stage in order; skipped when all final checkpoints already exist."""
    run_dir = out / "runs" / mechanism
    if all(_final_ckpt(run_dir, s).is_file() for s in cfg["stages"]):
        log.info("%s: checkpoints present, skipping training", mechanism)
        return []
    run_dir.mkdir(parents=True, exist_ok=True)
    model = new_model(cfg, pre, mechanism)
    records = []
    with open(run_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for stage in stage_configs(cfg):
            m = run_stage(model, stage, splits.train, splits.valid, _seeds(cfg["seed"])["batches"], run_dir, fh)
            records.extend(m.epochs)
    return records


def load_stage_model(cfg: dict, pre: Pretrained, mechanism: str, stage: dict, out: Path) -> SpeechLLM:
    path = _final_ckpt(out / "runs" / mechanism, stage)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint {path}; run the train step first")
    model = new_model(cfg, pre, mechanism)
    load_checkpoint(model, path)
    return model


# ---------------------------------------------------------------- decoding and scoring

def decode_split(model: SpeechLLM, utts: Sequence[SyntheticUtterance], max_new: int, ngram: int) -> list[dict]:
    rows = []
    for u in utts:
        labels = remove_ngram_repetitions(model.transcribe(u, max_new), ngram)
        rows.append({"utt_id": u.utt_id, "lang": u.lang, "ref": u.text, "hyp": render_text(labels, u.lang),
                     "ref_labels": list(u.tokens), "hyp_labels": labels})
    return rows


def write_jsonl(rows: Sequence[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def decode_mechanism(cfg: dict, pre: Pretrained, splits: Splits, mechanism: str, out: Path) -> None:
    run_dir = out / "runs" / mechanism
    for stage in cfg["stages"]:
        model = load_stage_model(cfg, pre, mechanism, stage, out)
        for split in cfg["eval"]["splits"]:
            rows = decode_split(model, splits.get(split), cfg["eval"]["max_new"], cfg["eval"]["ngram"])
            write_jsonl(rows, run_dir / f"hyps_{stage['name']}_{split}.jsonl")


def score_records(rows: Sequence[dict]):
    return aggregate(score_utterance(r["ref"], r["hyp"], r["lang"], r.get("utt_id", "")) for r in rows)


def score_mechanism(cfg: dict, mechanism: str, out: Path) -> dict:
    """Write per stage/split reports plus ``eval_report.json`` summarising them."""
    run_dir = out / "runs" / mechanism
    summary = {"mechanism": mechanism, "projector": cfg["projector"]["kind"], "seed": cfg["seed"], "results": {},
               "columns": [[s["name"], sp] for s in cfg["stages"] for sp in cfg["eval"]["splits"]]}
    for stage in cfg["stages"]:
        for split in cfg["eval"]["splits"]:
            hyp_path = run_dir / f"hyps_{stage['name']}_{split}.jsonl"
            if not hyp_path.is_file():
                raise FileNotFoundError(f"no hypotheses {hyp_path}; run the decode step first")
            rows = read_jsonl(hyp_path)
            report = score_records(rows)
            tag = f"{stage['name']}_{split}"
            (run_dir / f"report_{tag}.json").write_text(report.to_json(), encoding="utf-8")
            (run_dir / f"report_{tag}.txt").write_text(report.to_table(), encoding="utf-8")
            summary["results"].setdefault(stage["name"], {})[split] = {
                "rate": report.overall.rate,
                "token_accuracy": token_accuracy([r["ref_labels"] for r in rows], [r["hyp_labels"] for r in rows]),
                "utterances": report.overall.utterances,
            }
    (run_dir / "eval_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


# ---------------------------------------------------------------- comparison

def compare_mechanisms(run_dirs: Sequence[str | Path], metric: str = "rate") -> tuple[str, list[dict]]:
    """Markdown table and records, one row per run, one column per (stage, split).

    Rates are shown in percent with two decimals; the best (lowest rate, or
    highest accuracy) value per column is bolded. Values are compared after
    rounding to the displayed precision, so every displayed tie is marked.
    """
    if not run_dirs:
        raise ValueError("compare needs at least one run directory")
    reports = []
    for d in run_dirs:
        path = Path(d) / "eval_report.json"
        if not path.is_file():
            raise MissingReportError(f"no eval report in {d}")
        reports.append(json.loads(path.read_text(encoding="utf-8")))
    columns = []
    for rep in reports:
        for stage, split in rep["columns"]:
            if (stage, split) not in columns:
                columns.append((stage, split))
    higher_better = metric == "token_accuracy"
    cells = [[None if s not in r["results"] or sp not in r["results"][s] else
              round(100 * r["results"][s][sp][metric], 2) for s, sp in columns] for r in reports]
    best = []
    for j in range(len(columns)):
        vals = [row[j] for row in cells if row[j] is not None]
        best.append((max(vals) if higher_better else min(vals)) if vals else None)
    label = "token accuracy (%)" if higher_better else "WER/CER (%)"
    head = "| mechanism | " + " | ".join(f"{s} {sp}" for s, sp in columns) + " |"
    lines = [f"{label}; best per column in bold", "", head, "|" + "---|" * (len(columns) + 1)]
    records = []
    for rep, row in zip(reports, cells):
        shown = []
        for j, v in enumerate(row):
            if v is None:
                shown.append("-")
            else:
                shown.append(f"**{v:.2f}**" if v == best[j] else f"{v:.2f}")
        lines.append(f"| {rep['mechanism']} | " + " | ".join(shown) + " |")
        records.append({"mechanism": rep["mechanism"], "metric": metric,
                        **{f"{s}/{sp}": v for (s, sp), v in zip(columns, row)},
                        "best": [f"{s}/{sp}" for (s, sp), v, b in zip(columns, row, best) if v is not None and v == b]})
    return "\n".join(lines) + "\n", records


# ---------------------------------------------------------------- orchestration

def resolve_config(config_path: str | Path | None, seed: int | None = None, quick: bool = False) -> dict:
    """Load a config file, or the built-in defaults when ``config_path`` is None.

    A run manifest is accepted too: its recorded config is used as is.
    """
    if config_path is None:
        return resolve({}, quick=quick, seed=seed)
    path = Path(config_path)
    if path.is_file():
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        if isinstance(raw, dict) and "manifest_version" in raw:
            return resolve(raw["config"], quick=False, seed=seed)
    return load_config(path, quick=quick, seed=seed)


def write_manifest(cfg: dict, out: Path, quick: bool) -> None:
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "package": "parafuse",
        "seed": cfg["seed"],
        "quick": quick,
        "mechanisms": mechanisms(cfg),
        "config": cfg,
        "artifacts": sorted(str(p.relative_to(out)) for p in out.rglob("*")
                            if p.is_file() and p.name != "manifest.yaml"),
    }
    (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")


def execute(cfg: dict, out: Path, steps: Sequence[str] = STEPS, quick: bool = False) -> None:
    """Run the requested pipeline steps; prerequisites are produced on demand."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(dump_config(cfg), encoding="utf-8")
    mechs = mechanisms(cfg)
    splits = prepare_data(cfg, out)
    needs_models = {"pretrain-encoders", "train", "decode"} & set(steps)
    pre = prepare_pretrained(cfg, out, splits) if needs_models else None
    for mech in mechs:
        if "train" in steps:
            train_mechanism(cfg, pre, splits, mech, out)
        if "decode" in steps:
            decode_mechanism(cfg, pre, splits, mech, out)
        if "score" in steps:
            score_mechanism(cfg, mech, out)
    if "compare" in steps:
        table, records = compare_mechanisms([out / "runs" / m for m in mechs])
        (out / "comparison.md").write_text(table, encoding="utf-8")
        write_jsonl(records, out / "comparison.jsonl")
    write_manifest(cfg, out, quick)


def run_experiment(config_path: str | Path | None, out: str | Path, seed: int | None = None,
                   quick: bool = False, steps: Sequence[str] = STEPS) -> int:
    """Run the pipeline and return a process exit code (0 on success).

    Config problems return 2 before anything is written; failures inside the
    pipeline are logged with their step context and return 1.
    """
    try:
        cfg = resolve_config(config_path, seed, quick)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    try:
        execute(cfg, Path(out), steps, quick)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported with context, then surfaced as an exit code
        log.error("run failed: %s: %s", type(exc).__name__, exc)
        return 1
    return 0
