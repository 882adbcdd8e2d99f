"""Synthetic two-view utterances.

Every label token carries two identity bits. The whisper-like view encodes
the high bit and the mhubert-like view the low bit, so a transcript can only
be recovered from both views together. Each token spans
``frames_per_token`` frames on a shared grid; the mhubert view ends with one
silent frame and the whisper view is padded with silence to 5/4 of that
length, so the two streams differ in length the way two encoders with
different frame rates would.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LANGUAGES = ("en", "fr", "de", "it", "pt", "es", "ru", "vi", "ja", "ko", "th")
UNSEGMENTED = frozenset({"ja", "ko", "th"})

_ONSETS = "kstnhmrbdgpz"
_VOWELS = "aeiou"


def label_name(label: int) -> str:
    """Readable syllable for a label index: 0 -> 'ka', 1 -> 'ke', ..."""
    onset, vowel = divmod(label, len(_VOWELS))
    if onset >= len(_ONSETS):
        raise ValueError(f"label {label} has no name")
    return _ONSETS[onset] + _VOWELS[vowel]


def render_text(labels: Sequence[int], lang: str) -> str:
    sep = "" if lang in UNSEGMENTED else " "
    return sep.join(label_name(t) for t in labels)


@dataclass
class SyntheticUtterance:
    utt_id: str
    view_w: np.ndarray  # T_w x d_raw
    view_m: np.ndarray  # T_m x d_raw
    tokens: list[int]
    lang: str
    duration_s: float

    @property
    def text(self) -> str:
        return render_text(self.tokens, self.lang)


@dataclass
class TaskSpec:
    """Everything shared between splits of one synthetic task."""
    n_labels: int = 4
    d_raw: int = 16
    frames_per_token: int = 2
    frame_seconds: float = 2.0
    min_tokens: int = 3
    max_tokens: int = 12
    task_seed: int = 1234
    prototypes_w: np.ndarray = field(init=False, repr=False)
    prototypes_m: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        bits = math.log2(self.n_labels)
        if bits != int(bits) or int(bits) % 2:
            raise ValueError("n_labels must be 4, 16, 64, ... so its bits split evenly")
        half = 2 ** (int(bits) // 2)
        rng = np.random.default_rng(self.task_seed)
        self.prototypes_w = rng.choice([-1.0, 1.0], size=(half, self.d_raw))
        self.prototypes_m = rng.choice([-1.0, 1.0], size=(half, self.d_raw))

    @property
    def half_size(self) -> int:
        return self.prototypes_w.shape[0]

    def split(self, label: int) -> tuple[int, int]:
        """(high half, low half) of a label's identity."""
        return divmod(label, self.half_size)


def _f32(a: np.ndarray) -> np.ndarray:
    # round through float32 so the on-disk format is lossless
    return a.astype(np.float32).astype(np.float64)


def generate_dataset(seed: int, n_utts: int, langs: Sequence[str] = LANGUAGES,
                     task: TaskSpec | None = None, noise: float = 0.5,
                     prefix: str = "utt") -> list[SyntheticUtterance]:
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    if not langs:
        raise ValueError("langs must not be empty")
    unknown = set(langs) - set(LANGUAGES)
    if unknown:
        raise ValueError(f"unknown languages {sorted(unknown)}")
    task = task or TaskSpec()
    rng = np.random.default_rng(seed)
    fpt = task.frames_per_token
    out = []
    for i in range(n_utts):
        n_tok = int(rng.integers(task.min_tokens, task.max_tokens + 1))
        labels = rng.integers(0, task.n_labels, size=n_tok)
        lang = str(langs[int(rng.integers(len(langs)))])
        t_m = fpt * n_tok + 1
        t_w = int(round(t_m * 5 / 4))
        view_w = np.zeros((t_w, task.d_raw))
        view_m = np.zeros((t_m, task.d_raw))
        for j, lab in enumerate(labels):
            hi, lo = task.split(int(lab))
            view_w[j * fpt:(j + 1) * fpt] = task.prototypes_w[hi]
            view_m[j * fpt:(j + 1) * fpt] = task.prototypes_m[lo]
        view_w += rng.normal(0.0, noise, size=view_w.shape)
        view_m += rng.normal(0.0, noise, size=view_m.shape)
        out.append(SyntheticUtterance(
            utt_id=f"{prefix}{i:05d}",
            view_w=_f32(view_w),
            view_m=_f32(view_m),
            tokens=[int(t) for t in labels],
            lang=lang,
            duration_s=t_w * task.frame_seconds,
        ))
    return out


def prototype_accuracy(utts: Iterable[SyntheticUtterance], task: TaskSpec, views: str = "wm") -> float:
    """Token accuracy of nearest-prototype decoding from the chosen views.

    Ties (labels indistinguishable from the given views) are split evenly,
    so the value is the expected accuracy of a uniform guess among them.
    """
    fpt = task.frames_per_token
    labels = np.arange(task.n_labels)
    hi_of, lo_of = np.divmod(labels, task.half_size)
    correct = total = 0.0
    for u in utts:
        for j, lab in enumerate(u.tokens):
            dist = np.zeros(task.n_labels)
            if "w" in views:
                seg = u.view_w[j * fpt:(j + 1) * fpt].mean(axis=0)
                dist += ((task.prototypes_w[hi_of] - seg) ** 2).sum(axis=1)
            if "m" in views:
                seg = u.view_m[j * fpt:(j + 1) * fpt].mean(axis=0)
                dist += ((task.prototypes_m[lo_of] - seg) ** 2).sum(axis=1)
            best = np.flatnonzero(np.isclose(dist, dist.min(), rtol=0, atol=1e-9))
            if lab in best:
                correct += 1.0 / best.size
            total += 1
    return correct / total


def _pack(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": base64.b64encode(a.astype("<f4").tobytes()).decode("ascii")}


def _unpack(d: dict) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(d["data"]), dtype="<f4")
    return raw.reshape(d["shape"]).astype(np.float64)


def save_dataset(utts: Sequence[SyntheticUtterance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            rec = {"utt_id": u.utt_id, "lang": u.lang, "tokens": u.tokens,
                   "duration_s": u.duration_s, "view_w": _pack(u.view_w), "view_m": _pack(u.view_m)}
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> list[SyntheticUtterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(SyntheticUtterance(
                utt_id=rec["utt_id"], view_w=_unpack(rec["view_w"]), view_m=_unpack(rec["view_m"]),
                tokens=[int(t) for t in rec["tokens"]], lang=rec["lang"],
                duration_s=float(rec["duration_s"])))
    return out


def split_validation(utts: Sequence[SyntheticUtterance], fraction: float = 0.05,
                     seed: int = 0) -> tuple[list[SyntheticUtterance], list[SyntheticUtterance]]:
    """Hold out ``fraction`` of utterances (at least one) for validation."""
    n_valid = max(1, int(round(len(utts) * fraction)))
    order = np.random.default_rng(seed).permutation(len(utts))
    held = set(order[:n_valid].tolist())
    train = [u for i, u in enumerate(utts) if i not in held]
    valid = [u for i, u in enumerate(utts) if i in held]
    return train, valid
