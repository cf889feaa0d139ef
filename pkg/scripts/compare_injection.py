"""Paired runs of DGMRec against the NN-injection variant, with per-missing-level recall.

    python3 scripts/compare_injection.py --spec configs/desk.txt --seeds 0 1 2
"""
import argparse

import numpy as np
import torch

from dgmrec.config import TrainConfig, load_config
from dgmrec.datagen import SyntheticSpec, build_bundle
from dgmrec.evaluate import eval_by_missing_level
from dgmrec.trainer import model_scores, train, train_baseline


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--spec", default="configs/desk.txt")
    p.add_argument("--config", default="configs/train.txt")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--max-epochs", type=int)
    args = p.parse_args()
    torch.set_num_threads(1)
    overrides = {"max_epochs": args.max_epochs} if args.max_epochs else {}
    results = {"full": [], "dgmrec_nn_inject": []}
    for seed in args.seeds:
        bundle = build_bundle(load_config(SyntheticSpec, args.spec, seed=seed))
        cfg = load_config(TrainConfig, args.config, seed=seed, **overrides)
        for kind in results:
            ctx, rep = train(cfg, bundle) if kind == "full" else train_baseline(kind, cfg, bundle)
            levels = eval_by_missing_level(model_scores(ctx.model, ctx.inputs()), bundle.dataset, bundle.plan)
            by_level = " ".join(f"L{lv}={v['recall@20']:.4f}" for lv, v in levels.items())
            print(f"seed={seed} {kind:17s} R@20={rep.test['recall@20']:.4f} {by_level} best_epoch={rep.best_epoch}")
            results[kind].append(rep.test["recall@20"])
    full, inj = np.mean(results["full"]), np.mean(results["dgmrec_nn_inject"])
    print(f"mean R@20 full={full:.4f} nn_inject={inj:.4f} relative={100 * (full / inj - 1):+.2f}%")


if __name__ == "__main__":
    main()
