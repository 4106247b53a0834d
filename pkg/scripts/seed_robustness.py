#!/usr/bin/env python3
"""Repeat the desk pipeline over several seeds and compare base vs hybrid MRR.

Each seed gets its own workdir under --root. Prints one line per seed plus the
first and last mean reward from the RL trace.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from qenrich import pipeline
from qenrich.cli import main as cli
from qenrich.config import RunConfig

STAGES = ("prepare", "train-cs", "train-qse", "train-rl", "build-index", "build-pools")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--root", default="runs/seeds")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args(argv)

    print("seed  base_mrr  hybrid_mrr  reward_first  reward_last")
    for seed in (int(s) for s in args.seeds.split(",")):
        work = Path(args.root) / f"seed-{seed}"
        for stage in STAGES:
            code = cli([stage, "--config", args.config, "--workdir", str(work), "--seed", str(seed)])
            if code:
                return code
        cfg = RunConfig.load(args.config).with_overrides([f"paths.workdir={work}", f"seed={seed}"])
        base = pipeline.evaluate(cfg.with_overrides(["hybrid.mode=base_only"]), write=False).mrr
        hybrid = pipeline.evaluate(cfg.with_overrides(["hybrid.mode=hybrid"]), write=False).mrr
        with open(work / "reports" / "reward_trace.csv") as fh:
            trace = [float(r["mean_reward"]) for r in csv.DictReader(fh)]
        print(f"{seed:<6}{base:<10.4f}{hybrid:<12.4f}{trace[0]:<14.4f}{trace[-1]:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
