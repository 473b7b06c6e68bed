"""Spread of group-centered log-likelihoods against latent size, with and without 1/sqrt(N).

    python scripts/ldvn_probe.py --ns 100,1000,10000,100000 --groups 256
"""

import argparse

from latentreg.oracles import ldvn_variance_probe


def cli():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--ns", default="100,1000,10000,100000")
    p.add_argument("--groups", type=int, default=256)
    p.add_argument("--trajs", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    ns = [int(x) for x in args.ns.split(",")]
    rows, exponent = ldvn_variance_probe(ns, groups=args.groups, j=args.trajs, seed=args.seed)
    print(f"{'N':>8} {'std raw':>12} {'std /sqrt(N)':>14} {'raw/scaled':>11}")
    for r in rows:
        print(f"{r.n:>8} {r.std_unscaled:>12.4f} {r.std_scaled:>14.4f} {r.std_unscaled / r.std_scaled:>11.1f}")
    scaled = [r.std_scaled for r in rows]
    print(f"log-log exponent {exponent:.4f}; scaled max/min {max(scaled) / min(scaled):.3f}")


if __name__ == "__main__":
    cli()
