"""Recall@20 against the fraction of missing (item, modality) entries, nested plans.

    python3 scripts/missing_ratio_sweep.py --seeds 0 1
"""
import argparse

import numpy as np
import torch

from dgmrec.config import TrainConfig, load_config
from dgmrec.datagen import SyntheticSpec, build_bundle, make_missing_plan_ratio, with_plan
from dgmrec.trainer import train, train_baseline


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--spec", default="configs/desk_ratio.txt")
    p.add_argument("--config", default="configs/train.txt")
    p.add_argument("--ratios", type=float, nargs="+", default=[0.0, 0.2, 0.4, 0.6, 0.8])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--max-epochs", type=int, default=30)
    args = p.parse_args()
    torch.set_num_threads(1)
    curves = {"full": [], "dgmrec_nn_inject": []}
    for seed in args.seeds:
        base = build_bundle(load_config(SyntheticSpec, args.spec, seed=seed))
        cfg = load_config(TrainConfig, args.config, seed=seed, max_epochs=args.max_epochs)
        plans = make_missing_plan_ratio(base.dataset.num_items, base.num_modalities, args.ratios, seed)
        row = {k: [] for k in curves}
        for ratio, plan in zip(args.ratios, plans):
            bundle = with_plan(base, plan)
            row["full"].append(train(cfg, bundle)[1].test["recall@20"])
            row["dgmrec_nn_inject"].append(train_baseline("dgmrec_nn_inject", cfg, bundle)[1].test["recall@20"])
            print(f"seed={seed} ratio={ratio:.1f} full={row['full'][-1]:.4f} "
                  f"nn_inject={row['dgmrec_nn_inject'][-1]:.4f}", flush=True)
        for k in curves:
            curves[k].append(row[k])
    for k, v in curves.items():
        m = np.mean(v, axis=0)
        print(f"{k:17s} " + " ".join(f"{x:.4f}" for x in m) + f"  drop={100 * (1 - m[-1] / m[0]):.1f}%")


if __name__ == "__main__":
    main()
