"""Command-line entry point (``parafuse``)."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import ConfigError, mechanisms
from .runner import (MissingReportError, compare_mechanisms, read_jsonl, run_experiment, score_records, write_jsonl)

log = logging.getLogger("parafuse")

OUT_ENV = "PARAFUSE_OUT"
DEFAULT_OUT = "parafuse-out"

PIPELINE = {
    "gen-data": ("gen-data",),
    "pretrain-encoders": ("gen-data", "pretrain-encoders"),
    "train": ("gen-data", "pretrain-encoders", "train"),
    "decode": ("gen-data", "pretrain-encoders", "decode"),
    "all": ("gen-data", "pretrain-encoders", "train", "decode", "score", "compare"),
}


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML experiment config (defaults built in)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, default=None, help=f"output root (else ${OUT_ENV}, else ./{DEFAULT_OUT})")
    p.add_argument("--quick", action="store_true", help="small dataset and few epochs, for smoke runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parafuse", description="Parallel-encoder fusion Speech-LLM toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write the synthetic two-view dataset",
        "pretrain-encoders": "CTC-adapt both encoders and pretrain the toy LM",
        "train": "two-stage training for every configured mechanism",
        "decode": "greedy decoding of every configured split with the final stage checkpoints",
        "all": "the whole pipeline plus scoring and the comparison table",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text))

    sc = sub.add_parser("score", help="score decoded runs, or standalone transcript files")
    _common(sc)
    sc.add_argument("--records", type=Path, help="JSONL with utt_id, lang, ref, hyp per line")
    sc.add_argument("--ref", type=Path, help="reference transcripts, one per line")
    sc.add_argument("--hyp", type=Path, help="hypotheses, line-aligned with --ref")
    sc.add_argument("--lang", type=Path, help="language codes, line-aligned with --ref")
    sc.add_argument("--json", action="store_true", help="print the machine-readable record instead of the table")

    cp = sub.add_parser("compare", help="table of several run directories")
    cp.add_argument("run_dirs", nargs="*", type=Path, help="directories holding eval_report.json")
    cp.add_argument("--out", type=Path, default=None, help="search <out>/runs/* when no directories are given")
    cp.add_argument("--metric", choices=("rate", "token_accuracy"), default="rate")
    cp.add_argument("--records", type=Path, default=None, help="also write records as JSONL here")

    gc = sub.add_parser("grad-check", help="finite-difference check of every trainable operation")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--only", nargs="*", default=None, help="check names to run (default: all)")
    return parser


def _lines(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").splitlines()


def cmd_score(args) -> int:
    if args.records or args.ref:
        if args.records:
            rows = read_jsonl(args.records)
        else:
            if not (args.hyp and args.lang):
                log.error("--ref needs --hyp and --lang")
                return 2
            refs, hyps, langs = _lines(args.ref), _lines(args.hyp), _lines(args.lang)
            if not len(refs) == len(hyps) == len(langs):
                log.error("ref/hyp/lang files differ in length: %d/%d/%d", len(refs), len(hyps), len(langs))
                return 2
            rows = [{"utt_id": str(i), "lang": lg.strip(), "ref": r, "hyp": h}
                    for i, (r, h, lg) in enumerate(zip(refs, hyps, langs))]
        report = score_records(rows)
        sys.stdout.write(report.to_json() if args.json else report.to_table())
        return 0
    return run_experiment(args.config, _out_dir(args), args.seed, args.quick, ("gen-data", "score", "compare"))


def cmd_compare(args) -> int:
    dirs = list(args.run_dirs)
    if not dirs:
        root = _out_dir(args) / "runs"
        dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
        resolved = _out_dir(args) / "config.resolved.yaml"
        if resolved.is_file():
            # keep the configured row order
            order = mechanisms(yaml.safe_load(resolved.read_text(encoding="utf-8")))
            dirs.sort(key=lambda d: order.index(d.name) if d.name in order else len(order))
    try:
        table, records = compare_mechanisms(dirs, args.metric)
    except (MissingReportError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    sys.stdout.write(table)
    if args.records:
        write_jsonl(records, args.records)
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results, seconds = run_suite(args.seeds, args.only)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    for name, err in worst.items():
        print(f"{'ok  ' if err < TOLERANCE else 'FAIL'} {name:<32} max rel err {err:.2e}")
    print(f"{len(results)} checks over {args.seeds} seeds in {seconds:.1f}s")
    return 0 if all(r.ok for r in results) else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "score":
        return cmd_score(args)
    if args.command == "compare":
        return cmd_compare(args)
    if args.command == "grad-check":
        return cmd_grad_check(args)
    try:
        return run_experiment(args.config, _out_dir(args), args.seed, args.quick, PIPELINE[args.command])
    except ConfigError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
