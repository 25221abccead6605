#!/usr/bin/env python3
"""Makespan against the list-scheduling bounds for both shipped task batches."""

import argparse
import sys
from dataclasses import replace

from stagekit.bench import load_shipped, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workers", type=int, nargs="+", default=[64, 128, 256, 320])
    ap.add_argument("--out-prefix", default="makespan")
    args = ap.parse_args(argv)

    bad = 0
    for name in ("ff_stage1", "ff_stage2"):
        cfg = load_shipped(f"{name}.cfg")
        cfg = cfg.with_(tasks=replace(cfg.tasks, workers=tuple(args.workers)))
        res = run_experiment(cfg)
        with open(f"{args.out_prefix}_{name}.csv", "w", encoding="utf-8") as fh:
            fh.write(res.to_csv())
        for row in res.rows:
            _, _, tasks, w, _, _, lo, hi, m, ok = row
            bad += not ok
            print(f"{name} W={w:<4} {float(lo):9.1f} <= {float(m):9.1f} <= {float(hi):9.1f}  {'ok' if ok else 'VIOLATED'}",
                  file=sys.stderr)
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
