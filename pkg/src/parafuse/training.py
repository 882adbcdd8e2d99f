"""Two-stage training of the Speech-LLM, checkpoints and metric records."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SyntheticUtterance
from .encoders import DivergenceError
from .model import GROUPS, SpeechLLM
from .optim import AdamHyper, OptimizerState, adam_step, clip_global_norm, lr_at, make_batches
from .tensor import GradTape, Tensor, add_all, scale

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "PARAFUSE-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class StageConfig:
    name: str
    trainable: frozenset[str]
    epochs: int = 6
    peak_lr: float = 3e-3
    warmup_steps: int = 200
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    max_seconds: float = 120.0

    def __post_init__(self):
        self.trainable = frozenset(self.trainable)
        unknown = self.trainable - set(GROUPS)
        if unknown:
            raise KeyError(f"stage {self.name!r}: unknown parameter groups {sorted(unknown)}")


def default_stages(epochs: int = 6, peak_lr: float = 3e-3, warmup_steps: int = 200) -> list[StageConfig]:
    """Stage 1 trains projector and fusion; stage 2 adds the LM adapters. Encoders stay frozen."""
    return [
        StageConfig("stage1", frozenset({"projector", "fusion"}), epochs, peak_lr, warmup_steps),
        StageConfig("stage2", frozenset({"projector", "fusion", "lm_lora"}), epochs, peak_lr, warmup_steps),
    ]


@dataclass
class StageMetrics:
    stage: str
    epochs: list[dict] = field(default_factory=list)

    @property
    def final_valid_loss(self) -> float:
        return self.epochs[-1]["valid_loss"] if self.epochs else float("nan")


def validation_loss(model: SpeechLLM, data: Sequence[SyntheticUtterance]) -> float:
    return float(np.mean([model.utterance_loss(u).item() for u in data]))


def snapshot(model: SpeechLLM) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, (_, t) in model.named_parameters().items()}


def run_stage(model: SpeechLLM, stage: StageConfig, train: Sequence[SyntheticUtterance],
              valid: Sequence[SyntheticUtterance], seed: int = 0, out_dir: str | Path | None = None,
              metrics_log=None) -> StageMetrics:
    """Train the groups named in ``stage.trainable``; everything else stays bit-identical.

    Writes ``<out_dir>/<stage>_epoch<k>.ckpt`` after every epoch and appends one
    JSON record per epoch to ``metrics_log`` (an open text file) when given.
    """
    params = model.set_trainable(stage.trainable)
    plans = [make_batches(train, stage.max_seconds, seed * 1000 + e) for e in range(stage.epochs)]
    total = sum(len(p) for p in plans)
    state = OptimizerState(AdamHyper(lr_peak=stage.peak_lr, warmup_steps=stage.warmup_steps,
                                     total_steps=max(total, 1), weight_decay=stage.weight_decay,
                                     clip_norm=stage.clip_norm))
    metrics = StageMetrics(stage.name)
    try:
        for epoch, batches in enumerate(plans, start=1):
            losses = []
            for batch in batches:
                if not params:
                    losses.append(float(np.mean([model.utterance_loss(u).item() for u in batch])))
                    continue
                with GradTape() as tape:
                    loss = scale(add_all([model.utterance_loss(u) for u in batch]), 1.0 / len(batch))
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(f"{stage.name}: loss became {value} in epoch {epoch}")
                tape.backward(loss)
                grads = {k: t.grad for k, t in params.items() if t.grad is not None}
                adam_step(params, clip_global_norm(grads, stage.clip_norm), state)
                losses.append(value)
            record = {
                "stage": stage.name, "epoch": epoch, "step": state.step,
                "lr": lr_at(state.step, state.hyper),
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "valid_loss": validation_loss(model, valid) if valid else float("nan"),
            }
            if not np.isfinite(record["valid_loss"]) and valid:
                raise DivergenceError(f"{stage.name}: validation loss became {record['valid_loss']}")
            metrics.epochs.append(record)
            log.info("%s epoch %d train %.4f valid %.4f", stage.name, epoch, record["train_loss"],
                     record["valid_loss"])
            if metrics_log is not None:
                metrics_log.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_log.flush()
            if out_dir is not None:
                save_checkpoint(model, Path(out_dir) / f"{stage.name}_epoch{epoch}.ckpt")
    finally:
        model.set_trainable(())
    return metrics


def save_checkpoint(model: SpeechLLM, path: str | Path) -> None:
    write_tensors(model.named_parameters(), path)


def write_tensors(named: dict[str, tuple[str, Tensor]], path: str | Path) -> None:
    """Text header (magic, version, one ``name group shape`` line per tensor) then float64 LE payloads."""
    named = sorted(named.items())
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", f"tensors {len(named)}"]
    for name, (grp, t) in named:
        lines.append(f"{name} {grp} {'x'.join(str(s) for s in t.shape) or '-'}")
    lines.append("end")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, (_, t) in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> dict[str, tuple[str, np.ndarray]]:
    with open(path, "rb") as fh:
        head = fh.readline().decode("ascii").split()
        if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a parafuse checkpoint")
        if int(head[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {head[1]}")
        n = int(fh.readline().decode("ascii").split()[1])
        manifest = []
        for _ in range(n):
            name, grp, shape = fh.readline().decode("ascii").split()
            dims = () if shape == "-" else tuple(int(s) for s in shape.split("x"))
            manifest.append((name, grp, dims))
        if fh.readline().decode("ascii").strip() != "end":
            raise ValueError("checkpoint header is not terminated")
        out = {}
        for name, grp, dims in manifest:
            count = int(np.prod(dims)) if dims else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"checkpoint truncated at {name}")
            out[name] = (grp, np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64))
    return out


def load_tensors(named: dict[str, tuple[str, Tensor]], path: str | Path) -> None:
    """Overwrite every tensor in ``named`` with the stored value of the same name."""
    stored = read_checkpoint(path)
    missing = set(named) - set(stored)
    if missing:
        raise KeyError(f"checkpoint {path} lacks {sorted(missing)[:5]}")
    extra = set(stored) - set(named)
    if extra:
        raise KeyError(f"checkpoint {path} has tensors the model does not: {sorted(extra)[:5]}")
    for name, (_, t) in named.items():
        arr = stored[name][1]
        if arr.shape != t.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} vs model {t.shape}")
        t.data = arr.copy()


def load_checkpoint(model: SpeechLLM, path: str | Path) -> None:
    load_tensors(model.named_parameters(), path)
    model._feature_cache.clear()
