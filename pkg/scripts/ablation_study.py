"""Mean test Recall@20 of the full model and its ablations over several seeds.

    python3 scripts/ablation_study.py --flags full no_disentangle no_generation no_alignment
"""
import argparse

import numpy as np
import torch

from dgmrec.config import ABLATIONS, TrainConfig, load_config
from dgmrec.datagen import SyntheticSpec, build_bundle
from dgmrec.trainer import run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--spec", default="configs/desk.txt")
    p.add_argument("--config", default="configs/train.txt")
    p.add_argument("--flags", nargs="+", default=["full", "no_disentangle", "no_generation", "no_alignment"],
                   choices=ABLATIONS)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = p.parse_args()
    torch.set_num_threads(1)
    table = {f: [] for f in args.flags}
    for seed in args.seeds:
        bundle = build_bundle(load_config(SyntheticSpec, args.spec, seed=seed))
        cfg = load_config(TrainConfig, args.config, seed=seed)
        for flag in args.flags:
            table[flag].append(run_ablation(cfg, bundle, flag).test["recall@20"])
            print(f"seed={seed} {flag:15s} R@20={table[flag][-1]:.4f}", flush=True)
    for flag, vals in table.items():
        print(f"{flag:15s} mean={np.mean(vals):.4f} std={np.std(vals):.4f}")


if __name__ == "__main__":
    main()
