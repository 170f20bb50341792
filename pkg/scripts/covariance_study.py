"""Spectral deviation of the empirical perturbation covariance as K grows."""

import argparse

import numpy as np

from zofed import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, nargs="+", default=[16, 64])
    p.add_argument("--k-grid", type=int, nargs="+", default=[64, 256, 1024, 4096])
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    for n in args.n:
        study = ex.covariance_convergence_study(n, args.k_grid, args.trials, args.seed)
        print(f"n={n}  slope {study.slope:.3f}")
        for k, m, s in zip(study.k_grid, study.mean_dev, study.std_dev):
            # edge of the Marchenko-Pastur spectrum for comparison
            r = n / k
            print(f"  K={k:6d}  mean {m:.4f}  std {s:.4f}  2*sqrt(n/K)+n/K {2 * np.sqrt(r) + r:.4f}")


if __name__ == "__main__":
    main()
