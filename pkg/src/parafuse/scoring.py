"""Text normalisation, Levenshtein scoring and CER/WER reporting.

Japanese, Korean and Thai are scored by characters (whitespace removed),
every other language by words. Aggregates pool error counts over
utterances; they are never means of per-language rates.

The normaliser is a deliberate simplification of Whisper's: lowercase,
replace the characters in :data:`PUNCTUATION` with spaces, collapse
whitespace. Scores are therefore not comparable with official challenge
numbers, and reports say so in their header.
"""
from __future__ import annotations

import json
import re
import string
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

from .data import LANGUAGES, UNSEGMENTED

PUNCTUATION = frozenset(string.punctuation) | frozenset("“”‘’«»¿¡…\u2013\u2014、。，．！？：；「」『』（）【】・")
NORMALIZER_NOTE = "simplified normalizer (lowercase, punctuation->space, whitespace collapse)"

_WS = re.compile(r"\s+")


class UnknownLanguageError(ValueError):
    pass


def normalize_text(s: str) -> str:
    s = "".join(" " if ch in PUNCTUATION else ch for ch in s.lower())
    return _WS.sub(" ", s).strip()


def unit_for(lang: str) -> str:
    if lang not in LANGUAGES:
        raise UnknownLanguageError(f"language {lang!r} is not one of {', '.join(LANGUAGES)}")
    return "char" if lang in UNSEGMENTED else "word"


def tokenize(text: str, unit: str) -> list[str]:
    if unit == "char":
        return [ch for ch in text if not ch.isspace()]
    return text.split()


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a minimum-cost alignment.

    Among alignments with equal total cost, the one with the most
    substitutions (fewest insert/delete pairs) wins.
    """
    n, m = len(ref), len(hyp)
    # cell = (total, indels, S, D, I); compared on (total, indels)
    prev = [(j, j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, i, 0, i, 0)]
        r = ref[i - 1]
        for j in range(1, m + 1):
            d = prev[j - 1]
            if r == hyp[j - 1]:
                best = d
            else:
                best = (d[0] + 1, d[1], d[2] + 1, d[3], d[4])
            up = prev[j]
            cand = (up[0] + 1, up[1] + 1, up[2], up[3] + 1, up[4])
            if cand[:2] < best[:2]:
                best = cand
            left = cur[j - 1]
            cand = (left[0] + 1, left[1] + 1, left[2], left[3], left[4] + 1)
            if cand[:2] < best[:2]:
                best = cand
            cur.append(best)
        prev = cur
    _, _, s, d, ins = prev[m]
    return s, d, ins


@dataclass
class ScoredUtterance:
    lang: str
    ref: str
    hyp: str
    unit: str
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int
    utt_id: str = ""

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def error_rate(self) -> float:
        return self.errors / max(1, self.ref_len)


def score_utterance(ref: str, hyp: str, lang: str, utt_id: str = "") -> ScoredUtterance:
    unit = unit_for(lang)
    r = tokenize(normalize_text(ref), unit)
    h = tokenize(normalize_text(hyp), unit)
    s, d, i = edit_distance(r, h)
    return ScoredUtterance(lang, ref, hyp, unit, s, d, i, len(r), utt_id)


@dataclass
class Counts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_len: int = 0
    utterances: int = 0
    empty_refs: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        return self.errors / max(1, self.ref_len)

    def add(self, u: ScoredUtterance) -> None:
        self.substitutions += u.substitutions
        self.deletions += u.deletions
        self.insertions += u.insertions
        self.ref_len += u.ref_len
        self.utterances += 1
        self.empty_refs += u.ref_len == 0


@dataclass
class EvalReport:
    per_lang: dict[str, Counts]
    overall: Counts

    def to_record(self) -> dict:
        def row(c: Counts) -> dict:
            return {**asdict(c), "rate": c.rate}

        return {
            "normalizer": NORMALIZER_NOTE,
            "per_lang": {lang: {**row(c), "unit": unit_for(lang)} for lang, c in sorted(self.per_lang.items())},
            "overall": row(self.overall),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = [f"# {NORMALIZER_NOTE}",
                 f"{'lang':<8}{'unit':<6}{'rate%':>8}{'S':>6}{'D':>6}{'I':>6}{'N':>7}{'utts':>6}"]
        for lang, c in sorted(self.per_lang.items()):
            lines.append(f"{lang:<8}{unit_for(lang):<6}{100 * c.rate:>8.2f}{c.substitutions:>6}"
                         f"{c.deletions:>6}{c.insertions:>6}{c.ref_len:>7}{c.utterances:>6}")
        c = self.overall
        lines.append(f"{'overall':<8}{'':<6}{100 * c.rate:>8.2f}{c.substitutions:>6}{c.deletions:>6}"
                     f"{c.insertions:>6}{c.ref_len:>7}{c.utterances:>6}")
        if c.empty_refs:
            lines.append(f"# {c.empty_refs} empty reference(s): rate uses a reference length floor of 1")
        return "\n".join(lines) + "\n"


def aggregate(scored: Iterable[ScoredUtterance]) -> EvalReport:
    scored = list(scored)
    if not scored:
        raise ValueError("cannot aggregate an empty list of utterances")
    per_lang: dict[str, Counts] = {}
    overall = Counts()
    for u in scored:
        per_lang.setdefault(u.lang, Counts()).add(u)
        overall.add(u)
    return EvalReport(per_lang, overall)


def token_accuracy(refs: Iterable[Sequence], hyps: Iterable[Sequence]) -> float:
    """``1 - pooled token error rate`` over label sequences."""
    errors = total = 0
    for r, h in zip(refs, hyps):
        errors += sum(edit_distance(list(r), list(h)))
        total += len(r)
    return 1.0 - errors / max(1, total)
