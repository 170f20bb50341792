"""Guideline ablation on the toy task: difference scheme, activation and EMA."""

import argparse
import csv
import sys

from zofed import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--k", type=int, default=100, help="central-scheme K; twice-FD uses 2K forward samples")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--rounds", type=int, default=ex.ToyTask.rounds)
    p.add_argument("--csv", default=None, help="also write the table here")
    args = p.parse_args()

    task = ex.ToyTask(rounds=args.rounds)
    results = ex.ablation_run(task, ex.ablation_variants(args.k), seeds=tuple(args.seeds))
    rows = [r.row() for r in results]
    for r in rows:
        print(f"{r['variant']:26s} {100 * r['mean_acc']:6.2f} +- {100 * r['std_acc']:.2f}   tail var {r['tail_var']:.2e}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        print(f"wrote {args.csv}", file=sys.stderr)


if __name__ == "__main__":
    main()
