"""Multi-seed curriculum-versus-baseline experiment.

Runs the staged curriculum and the naive-mix ablation over several
seeds on one corpus, then reports the three directional checks: Q3
held-out style gain over Q1, Q3 held-in content retention versus Q2,
and Q3 beating the baseline on held-out CPC@0.5 for a majority of
seeds. Every arm shares its seed's pretrained base, so the comparison
isolates the data schedule.
"""
import argparse
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from flowstyle.curriculum import CurriculumConfig, run_curriculum
from flowstyle.dit import ModelConfig


def pair_values(path: str, key: str) -> list:
    """Per-pair metric values from a report, skipping the footer."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            d = json.loads(line)
            if "aggregates" in d:
                continue
            if not d.get("failed"):
                out.append(float(d[key]))
    return out


def seed_metrics(run_dir: str) -> dict:
    """The quantities the directional checks compare, for one seed."""
    heldout_q1 = pair_values(os.path.join(run_dir, "q1", "heldout.jsonl"),
                             "style_sim")
    heldout_q3 = pair_values(os.path.join(run_dir, "q3", "heldout.jsonl"),
                             "style_sim")
    heldin_q2 = pair_values(os.path.join(run_dir, "q2", "heldin.jsonl"),
                            "content")
    heldin_q3 = pair_values(os.path.join(run_dir, "q3", "heldin.jsonl"),
                            "content")
    cpc_q3 = pair_values(os.path.join(run_dir, "q3", "heldout.jsonl"),
                         "cpc_05")
    cpc_naive = pair_values(os.path.join(run_dir, "naive", "heldout.jsonl"),
                            "cpc_05")
    return {
        "heldout_style_q1": heldout_q1,
        "heldout_style_q3": heldout_q3,
        "heldin_content_q2": heldin_q2,
        "heldin_content_q3": heldin_q3,
        "cpc05_q3_mean": float(np.mean(cpc_q3)),
        "cpc05_naive_mean": float(np.mean(cpc_naive)),
    }


def directional_checks(per_seed: list) -> dict:
    """Pool pair-level values across seeds for the medians; CPC@0.5 is
    compared per seed."""
    pool = lambda key: np.concatenate([s[key] for s in per_seed])
    q1 = float(np.median(pool("heldout_style_q1")))
    q3 = float(np.median(pool("heldout_style_q3")))
    c2 = float(np.median(pool("heldin_content_q2")))
    c3 = float(np.median(pool("heldin_content_q3")))
    wins = sum(s["cpc05_q3_mean"] >= s["cpc05_naive_mean"] for s in per_seed)
    return {
        "heldout_style_median_q1": q1,
        "heldout_style_median_q3": q3,
        "style_gain": q3 - q1,
        "style_gain_ok": q3 >= q1 + 0.03,
        "heldin_content_median_q2": c2,
        "heldin_content_median_q3": c3,
        "content_drop": c2 - c3,
        "content_ok": c3 >= c2 - 0.05,
        "cpc_wins": int(wins),
        "cpc_ok": wins * 2 >= len(per_seed) + 1 if len(per_seed) > 1
                  else wins == 1,
        "per_seed_cpc": [(s["cpc05_q3_mean"], s["cpc05_naive_mean"])
                         for s in per_seed],
    }


def run_experiment(corpus: str, out: str, *, seeds, model_cfg: ModelConfig,
                   cur_kw: dict, resume: bool = False, log=print) -> dict:
    per_seed = []
    for seed in seeds:
        seed_dir = os.path.join(out, f"seed{seed}")
        cfg = CurriculumConfig(seed=seed, **cur_kw)
        t0 = time.time()
        for baseline in (False, True):
            tag = "naive" if baseline else "curriculum"
            done = os.path.join(
                seed_dir, "naive_summary.json" if baseline
                else "curriculum_summary.json")
            if resume and os.path.exists(done):
                log(f"seed {seed} {tag}: reusing finished run")
                continue
            log(f"seed {seed} {tag}: training")
            run_curriculum(corpus, seed_dir, cfg, model_cfg,
                           baseline=baseline, resume=resume, log=log)
        log(f"seed {seed}: {time.time() - t0:.0f}s")
        per_seed.append(seed_metrics(seed_dir))
    checks = directional_checks(per_seed)
    with open(os.path.join(out, "exp_summary.json"), "w",
              encoding="utf-8") as f:
        json.dump(checks, f, indent=2, sort_keys=True)
        f.write("\n")
    return checks


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", default="corpus")
    ap.add_argument("--out", default=os.path.join("runs", "curriculum_exp"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--depth", type=int, default=3)
    ap.add_argument("--patch", type=int, default=4)
    ap.add_argument("--rank", type=int, default=8)
    ap.add_argument("--base-steps", type=int, default=1200)
    ap.add_argument("--base-lr", type=float, default=3e-4)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--stage-steps", type=int, nargs=3, default=[800, 600, 800])
    ap.add_argument("--synth-ratio", type=float, default=0.25)
    ap.add_argument("--gamma", type=float, default=4.0)
    ap.add_argument("--sample-steps", type=int, default=20)
    ap.add_argument("--eval-styles", type=int, default=6)
    ap.add_argument("--eval-contents", type=int, default=2)
    ap.add_argument("--resume", action="store_true")
    args = ap.parse_args()

    model_cfg = ModelConfig(image_size=64, patch_size=args.patch,
                            dim=args.dim, depth=args.depth, heads=4)
    cur_kw = dict(rank=args.rank, stage_steps=tuple(args.stage_steps),
                  lr=args.lr, base_steps=args.base_steps,
                  base_lr=args.base_lr, synth_ratio=args.synth_ratio,
                  consistency_gamma=args.gamma,
                  sample_steps=args.sample_steps,
                  eval_styles=args.eval_styles,
                  eval_contents=args.eval_contents)
    checks = run_experiment(args.corpus, args.out, seeds=args.seeds,
                            model_cfg=model_cfg, cur_kw=cur_kw,
                            resume=args.resume)
    print(json.dumps(checks, indent=2, sort_keys=True))
    ok = checks["style_gain_ok"] and checks["content_ok"] and checks["cpc_ok"]
    print("directional checks:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
