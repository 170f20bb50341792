"""Toy spirals training at two perturbation counts against a backprop baseline."""

import argparse

from zofed import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--ks", type=int, nargs="+", default=[100, 500])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--rounds", type=int, default=ex.ToyTask.rounds)
    p.add_argument("--turns", type=float, default=ex.ToyTask.turns)
    args = p.parse_args()

    task = ex.ToyTask(rounds=args.rounds, turns=args.turns)
    results = ex.compare_variants(task, ex.k_trend_variants(tuple(args.ks)), seeds=tuple(args.seeds))
    for r in results:
        finals = " ".join(f"{100 * a:.1f}" for a in r.final_acc)
        print(f"{r.name:14s} mean {100 * r.mean:6.2f}  std {100 * r.std:5.2f}  per seed: {finals}")


if __name__ == "__main__":
    main()
