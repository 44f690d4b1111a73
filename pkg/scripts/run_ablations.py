#!/usr/bin/env python3
"""End-to-end desk-scale experiment: train a baseline, attach token sampling
plug-and-play, fine-tune, then produce the comparison artifacts (budget
sweeps across policies and scorings, single- vs multi-stage comparison,
per-stage K' histograms, retention masks).

Everything goes through the CLI so the emitted CSV/JSON artifacts are exactly
what external plotting tools consume.

    python scripts/run_ablations.py --out-dir results/
"""

import argparse
import json
import sys
from pathlib import Path

from atsvit.cli import main as cli


def sh(args: list[str]) -> None:
    print("+ atsvit", " ".join(args))
    rc = cli(args)
    if rc != 0:
        sys.exit(rc)


def run(out_dir: Path, seed: int, epochs: int, ft_epochs: int, lr: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    base = str(out_dir / "baseline.atsw")
    ft = str(out_dir / "finetuned.atsw")
    common = ["--seed", str(seed), "--quiet"]
    stages = "2,3,4,5"

    # 1. baseline (no sampling) and its eval
    sh(["train", "--out", base, "--epochs", str(epochs), "--lr", str(lr)] + common)
    sh(["eval", "--weights", base, "--out", str(out_dir / "baseline_eval.json")]
       + common)

    # 2. plug-and-play at the full budget, histograms included
    sh(["eval", "--weights", base, "--out", str(out_dir / "plugplay_eval.json"),
        "--ats-stages", stages, "--k", "16"] + common)

    # 3. fine-tune with sampling active at the full budget
    sh(["finetune", "--weights", base, "--out", ft, "--ats-stages", stages,
        "--epochs", str(ft_epochs), "--lr", "3e-4"] + common)
    sh(["eval", "--weights", ft, "--out", str(out_dir / "finetuned_eval.json"),
        "--ats-stages", stages, "--k", "16"] + common)

    # 4. score-assignment ablation (plug-and-play, budgets swept)
    sh(["sweep", "--weights", base, "--out", str(out_dir / "scoring_sweep.csv"),
        "--ats-stages", stages, "--budgets", "2,4,8,16",
        "--policies", "inverse",
        "--scorings", "cls-vnorm,cls,rowsum,random-token"] + common)

    # 5. sampling-policy ablation, fine-tuned backbone
    sh(["sweep", "--weights", ft, "--out", str(out_dir / "policy_sweep.csv"),
        "--ats-stages", stages, "--budgets", "2,4,8,16",
        "--policies", "inverse,topk,random", "--scorings", "cls-vnorm"] + common)

    # 6. single- vs multi-stage comparison at matched budgets
    sh(["sweep", "--weights", base, "--out", str(out_dir / "single_stage.csv"),
        "--ats-stages", "2", "--budgets", "2,4,8,16"] + common)
    sh(["sweep", "--weights", base, "--out", str(out_dir / "multi_stage.csv"),
        "--ats-stages", stages, "--budgets", "2,4,8,16"] + common)

    # 7. fine-tuned vs plug-and-play at a matched MAC level
    sh(["sweep", "--weights", base, "--out", str(out_dir / "plugplay_frac.csv"),
        "--ats-stages", stages, "--mac-fraction", "0.5,0.6,0.8"] + common)
    sh(["sweep", "--weights", ft, "--out", str(out_dir / "finetuned_frac.csv"),
        "--ats-stages", stages, "--mac-fraction", "0.5,0.6,0.8"] + common)

    # 8. retention masks for a handful of validation images
    sh(["masks", "--weights", ft, "--out-dir", str(out_dir / "masks"),
        "--ats-stages", stages, "--k", "16", "--count", "8"] + common)

    summary = {
        name: json.loads((out_dir / f"{name}_eval.json").read_text())["top1"]
        for name in ("baseline", "plugplay", "finetuned")
    }
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", type=Path, default=Path("results"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--ft-epochs", type=int, default=8)
    ap.add_argument("--lr", type=float, default=2e-3)
    args = ap.parse_args()
    run(args.out_dir, args.seed, args.epochs, args.ft_epochs, args.lr)
