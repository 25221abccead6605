#!/usr/bin/env python3
"""Sweep node counts with the calibrated model; write CSV and print a summary."""

import argparse
import sys

from stagekit.bench import crossover_nodes, load_shipped, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nodes", type=int, nargs="+", default=[1, 4, 16, 64, 256, 1024, 4096, 8192])
    ap.add_argument("--out", default="scaling.csv")
    ap.add_argument("--ledger-dir")
    args = ap.parse_args(argv)

    cfg = load_shipped(scenario="input_end_to_end").with_(nodes=tuple(args.nodes))
    res = run_experiment(cfg)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(res.to_csv())
    if args.ledger_dir:
        res.write_ledgers(args.ledger_dir)

    print(f"{'nodes':>6} {'collective_s':>13} {'independent_s':>14} {'ratio':>6} {'col GB/s':>9} {'ind GB/s':>9}",
          file=sys.stderr)
    for n in args.nodes:
        col, ind = res.details[n]["collective"], res.details[n]["independent"]
        print(f"{n:>6} {col.input_total_s:>13.3f} {ind.input_total_s:>14.3f} "
              f"{ind.input_total_s / col.input_total_s:>6.2f} {col.aggregate_input_bandwidth / 1e9:>9.2f} "
              f"{ind.aggregate_input_bandwidth / 1e9:>9.2f}", file=sys.stderr)
    print(f"collective wins from {crossover_nodes(cfg)} nodes", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
