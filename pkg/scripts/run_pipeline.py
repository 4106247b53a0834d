#!/usr/bin/env python3
"""Run every stage, then evaluate all modes and print an MRR table.

    python3 scripts/run_pipeline.py --config configs/desk.json --workdir runs/desk
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from qenrich import pipeline
from qenrich.cli import main as cli
from qenrich.config import RunConfig

STAGES = ("prepare", "train-cs", "train-qse", "train-rl", "build-index", "build-pools")
MODES = ("base_only", "qe_baseline", "no_rl", "enriched_only", "hybrid")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--skip-training", action="store_true", help="only evaluate an existing workdir")
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    common = ["--config", args.config, "--workdir", args.workdir, *extra]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    if not args.skip_training:
        for stage in STAGES:
            code = cli([stage, *common])
            if code:
                return code

    cfg = RunConfig.load(args.config).with_overrides(
        [f"paths.workdir={args.workdir}", *extra] + ([f"seed={args.seed}"] if args.seed is not None else []))
    rows = []
    for mode in MODES:
        for field in ("query", "description"):
            run_cfg = cfg.with_overrides([f"hybrid.mode={mode}"])
            rep = pipeline.evaluate(run_cfg, field)
            rows.append((mode, field, rep.r_at[1], rep.r_at[5], rep.r_at[10], rep.mrr))
    print(f"{'mode':<14}{'field':<13}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'MRR':>8}")
    for mode, field, r1, r5, r10, mrr in rows:
        print(f"{mode:<14}{field:<13}{r1:>8.4f}{r5:>8.4f}{r10:>8.4f}{mrr:>8.4f}")
    trace = Path(args.workdir) / "reports" / "reward_trace.csv"
    if trace.exists():
        print(f"\nreward trace: {trace}")
    summary = Path(args.workdir) / "reports" / "summary.json"
    summary.write_text(json.dumps([dict(zip(("mode", "field", "r1", "r5", "r10", "mrr"), r)) for r in rows],
                                  indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
