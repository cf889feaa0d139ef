"""CLUB estimate on correlated Gaussian pairs across correlation levels, next to the true MI.

    python3 scripts/club_gaussian.py --trials 5
"""
import argparse

import numpy as np

from dgmrec.probes import club_gaussian_trial, gaussian_mi_per_dim


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rhos", type=float, nargs="+", default=[0.0, 0.3, 0.6, 0.9])
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--dim", type=int, default=4)
    args = p.parse_args()
    print("rho   club/dim   mi/dim   rho^2/(1-rho^2)")
    for rho in args.rhos:
        est = np.mean([club_gaussian_trial(rho, d=args.dim, seed=s) for s in range(args.trials)])
        print(f"{rho:.2f}  {est:8.4f}  {gaussian_mi_per_dim(rho):7.4f}  {rho ** 2 / (1 - rho ** 2):8.4f}")


if __name__ == "__main__":
    main()
