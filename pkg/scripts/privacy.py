"""Loss-difference distributions on real spirals points versus pure noise inputs."""

import argparse

import numpy as np

from zofed import experiments as ex
from zofed.nn import init_params, mlp


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--k", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    task = ex.ToyTask()
    _, test = task.datasets()
    spec = mlp(task.sizes)
    params = init_params(spec, args.seed).values
    real, noise = ex.privacy_distribution_experiment(
        spec, params, test.batch(np.arange(args.batch_size)), k=args.k, seed=args.seed
    )
    for name, r in (("real", real), ("noise", noise)):
        bound = 3 * r.std / np.sqrt(r.sample_count)
        print(f"{name:5s} mean {r.mean:+.3e}  std {r.std:.3e}  |mean| bound {bound:.3e}")
    print(f"two-sample KS statistic {real.ks_statistic:.4f}")
    width = max(real.counts + noise.counts)
    for lo, a, b in zip(real.bin_edges, real.counts, noise.counts):
        print(f"{lo:+.2e} {'#' * (30 * a // width):30s} | {'*' * (30 * b // width)}")


if __name__ == "__main__":
    main()
