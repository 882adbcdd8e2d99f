"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line; the lines are repeated in the
terminal summary. The comparison run behind criteria 5-7 takes a few
minutes on one CPU core.
"""
import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import ctc_brute_force, is_subsequence, min_edits_exhaustive
from parafuse.adapters import init_lora, lora_forward, lora_merge
from parafuse.data import LANGUAGES
from parafuse.decoder import remove_ngram_repetitions
from parafuse.fusion import MECHANISMS, fuse_dfc, fuse_res_bi_caf, fuse_res_gated_bi_caf, \
    fuse_res_gated_bi_caf_dfc, fuse_res_uni_caf, init_fusion
from parafuse.gradcheck import run_suite
from parafuse.losses import CtcTarget, ctc_loss
from parafuse.runner import run_experiment
from parafuse.scoring import edit_distance, score_utterance
from parafuse.tensor import Tensor, log_softmax_rows
from parafuse.training import read_checkpoint

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "comparison.yaml"
FUSED = list(MECHANISMS)
BASELINES = ["whisper-only", "mhubert-only"]


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{n:>2}] {title}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def comparison(tmp_path_factory):
    out = tmp_path_factory.mktemp("comparison")
    start = time.perf_counter()
    code = run_experiment(CONFIG, out)
    return out, code, time.perf_counter() - start


def test_criterion_01_gradients():
    results, seconds = run_suite(20)
    failed = sorted({r.name for r in results if not r.ok})
    worst = max(r.max_rel_error for r in results)
    ok = not failed and seconds < 60 and len({r.seed for r in results}) >= 20
    verdict(1, "gradient suite", ok,
            f"{len(results)} checks, worst rel err {worst:.1e}, {seconds:.1f}s, failing {failed or 'none'}")


def test_criterion_02_ctc_oracle():
    rng = np.random.default_rng(2024)
    cases, worst = 0, 0.0
    while cases < 600:
        v = int(rng.integers(2, 5))
        target = tuple(int(t) for t in rng.integers(1, v, size=int(rng.integers(1, 4))))
        t_len = int(rng.integers(1, 7))
        if t_len < CtcTarget(target).min_frames():
            continue
        lp = log_softmax_rows(Tensor(rng.normal(size=(t_len, v)) * 2)).data
        worst = max(worst, abs(ctc_loss(Tensor(lp), CtcTarget(target)).item() - ctc_brute_force(lp, target)))
        cases += 1
    verdict(2, "CTC vs path enumeration", worst <= 1e-9, f"{cases} cases, max abs diff {worst:.1e}")


def test_criterion_03_edit_distance():
    lists = [p for n in range(7) for p in itertools.product("abc", repeat=n)]
    mismatches = sum(sum(edit_distance(r, h)) != min_edits_exhaustive(r, h) for r in lists for h in lists)
    routed = []
    for lang in LANGUAGES:
        u = score_utterance("ka ke", "ka ko", lang)
        want = ("char", 4) if lang in ("ja", "ko", "th") else ("word", 2)
        routed.append((u.unit, u.ref_len) == want and u.errors == 1)
    ok = mismatches == 0 and all(routed)
    verdict(3, "edit distance and routing", ok,
            f"{len(lists) ** 2} pairs, {mismatches} mismatches, {sum(routed)}/{len(LANGUAGES)} languages routed")


def test_criterion_04_degeneracy_chain():
    bad = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        t = int(rng.integers(1, 9))
        hw, hm = Tensor(rng.normal(size=(t, 64))), Tensor(rng.normal(size=(t, 48)))
        dfc = fuse_dfc(hw, hm).data
        params = {}
        for mech in FUSED[1:]:
            p = init_fusion(mech, 64, 48, seed=seed)
            for attn in (p.attn_wm, p.attn_mw):
                if attn is not None:
                    attn.w_o.data = np.zeros_like(attn.w_o.data)
            params[mech] = p
        checks = {
            "res-uni-caf": np.array_equal(fuse_res_uni_caf(hw, hm, params["res-uni-caf"]).data, hw.data),
            "res-bi-caf": np.array_equal(fuse_res_bi_caf(hw, hm, params["res-bi-caf"]).data, dfc),
            "res-gated-bi-caf": np.array_equal(fuse_res_gated_bi_caf(hw, hm, params["res-gated-bi-caf"]).data, dfc),
            "res-gated-bi-caf-dfc": np.array_equal(
                fuse_res_gated_bi_caf_dfc(hw, hm, params["res-gated-bi-caf-dfc"]).data,
                np.concatenate([dfc, dfc], axis=1)),
        }
        bad += [f"{m}@{seed}" for m, ok in checks.items() if not ok]
    verdict(4, "degeneracy chain (bitwise)", not bad, f"20 seeds, failures {bad or 'none'}")


def test_criterion_05_complementarity(comparison):
    out, code, seconds = comparison
    acc = {}
    for mech in FUSED + BASELINES:
        rep = json.loads((out / "runs" / mech / "eval_report.json").read_text())
        acc[mech] = 100 * rep["results"]["stage2"]["test"]["token_accuracy"]
    best_base = max(acc[b] for b in BASELINES)
    margins = {m: acc[m] - best_base for m in FUSED}
    ok = code == 0 and seconds < 600 and all(v >= 25 for v in margins.values())
    worst = min(margins, key=margins.get)
    verdict(5, "complementarity", ok,
            f"best baseline {best_base:.1f}%, smallest margin {margins[worst]:+.1f} ({worst}), {seconds:.0f}s")


def final_valid(metrics_path: Path) -> dict[str, float]:
    last = {}
    for line in metrics_path.read_text().splitlines():
        row = json.loads(line)
        last[row["stage"]] = row["valid_loss"]
    return last


def test_criterion_06_stage_trend(comparison):
    out, _, _ = comparison
    losses = {m: final_valid(out / "runs" / m / "metrics.jsonl") for m in FUSED}
    regress = [m for m, v in losses.items() if not v["stage2"] <= v["stage1"]]
    detail = ", ".join(f"{m} {v['stage1']:.4f}->{v['stage2']:.4f}" for m, v in losses.items())
    verdict(6, "stage 2 <= stage 1 validation loss", not regress, detail)


def test_criterion_07_freeze_contract(comparison):
    out, _, _ = comparison
    pre = {}
    for prefix, name in (("enc_w", "whisper"), ("enc_m", "mhubert"), ("lm", "lm")):
        for key, (grp, arr) in read_checkpoint(out / "pretrained" / f"{name}.ckpt").items():
            pre[f"{prefix}.{key}"] = (grp, arr)
    broken, trained = [], 0
    for mech in FUSED + BASELINES:
        run = out / "runs" / mech
        for ckpt in sorted(run.glob("stage*_epoch*.ckpt")):
            stored = read_checkpoint(ckpt)
            frozen = ("lm", "lm_lora", "encoder", "encoder_lora") if ckpt.name.startswith("stage1") else \
                ("lm", "encoder", "encoder_lora")
            for name, (grp, arr) in stored.items():
                if grp in frozen and not np.array_equal(arr, pre[name][1]):
                    broken.append(f"{mech}/{ckpt.name}:{name}")
            trained += any(grp == "projector" and name.startswith("projector") for name, (grp, _) in stored.items())
    verdict(7, "freeze contract", not broken and trained > 0,
            f"{trained} checkpoints compared against pretrained snapshots, {len(broken)} changed frozen tensors")


def test_criterion_08_lora():
    rng = np.random.default_rng(8)
    zero_diff, merge_diff = 0.0, 0.0
    for _ in range(100):
        d_in, d_out, r = (int(v) for v in rng.integers(1, 12, size=3))
        base, x = Tensor(rng.normal(size=(d_out, d_in))), Tensor(rng.normal(size=(int(rng.integers(1, 8)), d_in)))
        ad = init_lora(d_in, d_out, r, alpha=float(rng.uniform(0.5, 16)), seed=int(rng.integers(1 << 30)))
        zero_diff = max(zero_diff, np.abs(lora_forward(x, base, ad).data - x.data @ base.data.T).max())
        ad.b.data = rng.normal(size=ad.b.shape)
        merged = x.data @ lora_merge(base, ad).data.T
        merge_diff = max(merge_diff, np.abs(lora_forward(x, base, ad).data - merged).max())
    ok = zero_diff == 0.0 and merge_diff <= 1e-12
    verdict(8, "LoRA identity and merge", ok, f"100 cases, zero-b diff {zero_diff:.0e}, merge diff {merge_diff:.1e}")


def test_criterion_09_repetition_removal():
    examples = [
        remove_ngram_repetitions(list("abcdeabcde")) == list("abcde"),
        remove_ngram_repetitions(list("abab")) == list("abab"),
        remove_ngram_repetitions(["x"] * 12) == ["x", "x"],
    ]
    rng = np.random.default_rng(9)
    bad = 0
    for _ in range(1000):
        toks = [int(t) for t in rng.integers(0, int(rng.integers(1, 5)), size=int(rng.integers(0, 40)))]
        out = remove_ngram_repetitions(toks)
        bad += remove_ngram_repetitions(out) != out or not is_subsequence(out, toks)
    verdict(9, "repetition removal", all(examples) and bad == 0,
            f"{sum(examples)}/3 examples, {bad}/1000 property violations")


def test_criterion_10_determinism(tmp_path):
    codes = [run_experiment(None, tmp_path / name, quick=True) for name in ("a", "b")]
    a_files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                     if p.name.startswith(("eval_report", "report_", "comparison")))
    differ = [str(p) for p in a_files
              if (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()]
    ok = codes == [0, 0] and a_files and not differ
    verdict(10, "end-to-end determinism", ok, f"{len(a_files)} report files, {len(differ)} differ")
