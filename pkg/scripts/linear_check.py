"""Finite-difference identities on random two-layer linear networks."""

import argparse

from zofed import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--fixtures", type=int, default=1000)
    p.add_argument("--sigmas", type=float, nargs="+", default=[1e-6, 1e-4, 1e-2])
    p.add_argument("--trials", type=int, default=4)
    args = p.parse_args()

    print(f"{'sigma':>8s} {'scheme':>10s} {'ctr closed':>10s} {'fwd closed':>10s} {'sigma ind':>10s} {'cross':>10s}")
    for s in args.sigmas:
        r = ex.linear_identity_sweep(args.fixtures, s, args.trials)
        print(
            f"{s:8.0e} {r.scheme:10.2e} {r.closed_form_central:10.2e} {r.closed_form_forward:10.2e} "
            f"{r.sigma_independence:10.2e} {r.forward_cross_term:10.2e}"
        )


if __name__ == "__main__":
    main()
