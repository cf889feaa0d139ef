"""``dgmrec`` command line: gen-data, train, eval, sweep, gradcheck.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric divergence.
The only environment variable read is ``DGMREC_THREADS`` (torch thread count).
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from scipy import sparse

from . import formats
from .config import (
    ABLATIONS, ConfigError, TrainConfig, config_hash, dump_config, load_config, parse_kv,
    validate_train_config,
)
from .datagen import DataError, DatasetBundle, ModalityTable, SyntheticSpec, build_bundle, make_missing_plan_ratio, with_plan
from .evaluate import eval_by_missing_level, evaluate_scores
from .graph import SparseItemGraph
from .model import DGMRec
from .numcore import NumericError, load_checkpoint, save_checkpoint
from .trainer import (
    BASELINES, LightGCN, MatrixFactorization, TrainContext, _CFContext, encoding_diagnostics,
    model_scores, retrieval_report, train, train_baseline,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "DGMREC_THREADS"
SWEEP_KEYS = ("lambda1", "lambda2", "alpha", "tau", "missing_ratio")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- manifests

@dataclasses.dataclass
class RunManifest:
    config_hash: str
    seed: int
    command: str
    inputs: list[str]
    outputs: list[str]
    started: str
    finished: str = ""

    def dump(self) -> str:
        lines = [
            f"config_hash = {self.config_hash}",
            f"seed = {self.seed}",
            f"command = {self.command}",
            f"inputs = {','.join(self.inputs)}",
            f"outputs = {','.join(self.outputs)}",
            f"started = {self.started}",
            f"finished = {self.finished}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "RunManifest":
        kv = parse_kv(text)

        def listed(key):
            return [p for p in kv.get(key, "").split(",") if p]

        return cls(kv["config_hash"], int(kv["seed"]), kv["command"], listed("inputs"),
                   listed("outputs"), kv["started"], kv.get("finished", ""))

    def write(self, directory: Path, name: str = "manifest.txt") -> Path:
        self.finished = _now()
        path = directory / name
        path.write_text(self.dump())
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def read_manifest(path: str | Path) -> RunManifest:
    return RunManifest.parse(Path(path).read_text())


# ---------------------------------------------------------------- records

def metric_record(metric: str, K: int | None, split: str, bucket, value: float, seed: int, chash: str) -> dict:
    return {"metric": metric, "K": K, "split": split, "bucket": bucket, "value": value,
            "seed": seed, "config_hash": chash}


def ranking_records(metrics: dict[str, float], split: str, bucket, seed: int, chash: str) -> list[dict]:
    out = []
    for key, value in metrics.items():
        name, _, k = key.partition("@")
        if k:
            out.append(metric_record(name, int(k), split, bucket, value, seed, chash))
    return out


def write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------- checkpoints

def save_run_checkpoint(path: Path, ctx: TrainContext, kind: str, chash: str) -> Path:
    """Write model tensors (plus tables and graphs for DGMRec) and the text record beside them."""
    tensors = {f"model.{k}": v for k, v in ctx.model.state_dict().items()}
    for m, (t, g) in enumerate(zip(ctx.tables, ctx.graphs)):
        coo = g.matrix.tocoo()
        tensors[f"table.{m}.features"] = t.features
        tensors[f"table.{m}.available"] = t.available.astype(np.float32)
        tensors[f"graph.{m}.rows"] = coo.row.astype(np.float32)
        tensors[f"graph.{m}.cols"] = coo.col.astype(np.float32)
        tensors[f"graph.{m}.weights"] = coo.data.astype(np.float32)
        tensors[f"graph.{m}.flagged"] = g.flagged.astype(np.float32)
    save_checkpoint(path, tensors)
    dims = ",".join(str(t.dim) for t in ctx.tables)
    record = path.with_suffix(".txt")
    record.write_text(
        f"kind = {kind}\nmodality_dims = {dims}\nconfig_hash = {chash}\n"
        f"num_users = {ctx.ds.num_users}\nnum_items = {ctx.ds.num_items}\n"
    )
    return record


def load_run_checkpoint(path: Path, cfg: TrainConfig, bundle: DatasetBundle) -> tuple[TrainContext, str]:
    record = parse_kv(path.with_suffix(".txt").read_text())
    if record["config_hash"] != config_hash(cfg):
        raise UsageError(f"checkpoint config hash {record['config_hash']} does not match config "
                         f"{config_hash(cfg)}")
    ds = bundle.dataset
    if int(record["num_users"]) != ds.num_users or int(record["num_items"]) != ds.num_items:
        raise DataError("checkpoint was trained on a dataset of a different shape")
    kind = record["kind"]
    arrays = load_checkpoint(path)
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model.")}
    if kind == "mf_bpr":
        model = MatrixFactorization(ds.num_users, ds.num_items, cfg.d)
    elif kind == "lightgcn":
        model = LightGCN(ds.num_users, ds.num_items, cfg.d, cfg.num_layers, ds.train)
    else:
        dims = tuple(int(x) for x in record["modality_dims"].split(","))
        model = DGMRec(ds.num_users, ds.num_items, dims, d=cfg.d)
    model.load_state_dict(state)
    model.eval()
    if kind in ("mf_bpr", "lightgcn"):
        return _CFContext(model, [], [], ds, cfg), kind
    tables, graphs = [], []
    for m in range(len(model.modality_dims)):
        tables.append(ModalityTable(m, arrays[f"table.{m}.features"], arrays[f"table.{m}.available"] > 0.5))
        n = ds.num_items
        mat = sparse.csr_matrix(
            (arrays[f"graph.{m}.weights"].astype(np.float64),
             (arrays[f"graph.{m}.rows"].astype(np.int64), arrays[f"graph.{m}.cols"].astype(np.int64))),
            shape=(n, n),
        )
        graphs.append(SparseItemGraph(mat, arrays[f"graph.{m}.flagged"] > 0.5))
    return TrainContext(model, tables, graphs, ds, cfg), kind


# ---------------------------------------------------------------- commands

def _load_train_config(path: str, **overrides) -> TrainConfig:
    cfg = load_config(TrainConfig, path, **{k: v for k, v in overrides.items() if v is not None})
    validate_train_config(cfg)
    return cfg


def cmd_gen_data(args) -> int:
    spec = load_config(SyntheticSpec, args.spec, **({"seed": args.seed} if args.seed is not None else {}))
    out = Path(args.out)
    written = formats.save_bundle(out, build_bundle(spec))
    manifest = RunManifest(config_hash(spec), spec.seed, "gen-data", [str(args.spec)],
                           [p.name for p in written], _now())
    manifest.write(out)
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def _train_one(cfg: TrainConfig, bundle: DatasetBundle, kind: str):
    if kind == "dgmrec":
        return train(cfg, bundle)
    return train_baseline(kind, cfg, bundle)


def cmd_train(args) -> int:
    cfg = _load_train_config(args.config, ablation=args.ablation, max_epochs=args.max_epochs, seed=args.seed)
    kind = args.baseline or "dgmrec"
    if args.baseline and cfg.ablation != "full":
        raise UsageError("--ablation applies to DGMRec only, not to baselines")
    bundle = formats.load_bundle(args.data)
    if cfg.modality_dims and tuple(cfg.modality_dims) != tuple(t.dim for t in bundle.tables):
        raise DataError(f"config modality_dims {cfg.modality_dims} do not match the data")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    manifest = RunManifest(chash, cfg.seed, f"train {kind}", [str(args.config), str(args.data)], [], _now())
    ctx, report = _train_one(cfg, bundle, kind)
    (out / "config.txt").write_text(dump_config(cfg))
    record = save_run_checkpoint(out / "checkpoint.ckpt", ctx, kind, chash)
    epochs = [{**e, "seed": cfg.seed, "config_hash": chash} for e in report.epochs]
    write_jsonl(out / "epochs.jsonl", epochs)
    metrics = []
    for split, values in (("valid", report.valid), ("test", report.test)):
        metrics += ranking_records(values, split, "all", cfg.seed, chash)
    write_jsonl(out / "metrics.jsonl", metrics)
    manifest.outputs = ["config.txt", "checkpoint.ckpt", record.name, "epochs.jsonl", "metrics.jsonl"]
    manifest.write(out)
    print(f"{kind} best epoch {report.best_epoch}: " + " ".join(f"{k}={v:.4f}" for k, v in report.test.items()))
    return EXIT_OK


def evaluate_run(ctx: TrainContext, kind: str, bundle: DatasetBundle, ks, retrieval: bool,
                 diagnostics: bool, chash: str) -> list[dict]:
    cfg = ctx.config
    inputs = ctx.inputs()
    scores = model_scores(ctx.model, inputs)
    records = []
    for split in ("valid", "test"):
        records += ranking_records(evaluate_scores(scores, ctx.ds, split, ks), split, "all", cfg.seed, chash)
    for level, values in eval_by_missing_level(scores, ctx.ds, bundle.plan, ks).items():
        records += ranking_records(values, "test", f"missing={level}", cfg.seed, chash)
    if kind == "dgmrec" and retrieval:
        for mode, table in retrieval_report(ctx, bundle).items():
            for level, values in table.items():
                records += [metric_record(f"hit_{mode}", int(k.split("@")[1]), "retrieval",
                                          f"missing={level}", v, cfg.seed, chash)
                            for k, v in values.items() if k.startswith("hit@")]
    if kind == "dgmrec" and diagnostics:
        shared = bundle.latents.shared if bundle.latents is not None else None
        for name, value in encoding_diagnostics(ctx, shared).items():
            records.append(metric_record(name, None, "diagnostics", "all", value, cfg.seed, chash))
    return records


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = _load_train_config(run / "config.txt")
    bundle = formats.load_bundle(args.data)
    ctx, kind = load_run_checkpoint(run / "checkpoint.ckpt", cfg, bundle)
    if args.retrieval and kind != "dgmrec":
        raise UsageError("--retrieval needs a DGMRec checkpoint")
    ks = tuple(int(k) for k in args.ks.split(","))
    chash = config_hash(cfg)
    records = evaluate_run(ctx, kind, bundle, ks, args.retrieval, args.diagnostics, chash)
    out = Path(args.out) if args.out else run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "eval.jsonl", records)
    RunManifest(chash, cfg.seed, "eval", [str(run / "checkpoint.ckpt"), str(args.data)],
                ["eval.jsonl"], _now()).write(out)
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def parse_grid(text: str) -> list[dict[str, float]]:
    """Grid file: ``key = v1, v2, ...`` lines; the cells are the Cartesian product."""
    kv = parse_kv(text)
    unknown = sorted(set(kv) - set(SWEEP_KEYS))
    if unknown:
        raise ConfigError(f"unknown grid key(s): {', '.join(unknown)}")
    axes = {k: [float(x) for x in v.split(",") if x.strip()] for k, v in kv.items()}
    if not axes or any(not vals for vals in axes.values()):
        raise ConfigError("empty grid")
    keys = sorted(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def cmd_sweep(args) -> int:
    base = _load_train_config(args.config, max_epochs=args.max_epochs, seed=args.seed)
    cells = parse_grid(Path(args.grid).read_text())
    bundle = formats.load_bundle(args.data)
    kind = args.baseline or "dgmrec"
    ratios = sorted({c["missing_ratio"] for c in cells if "missing_ratio" in c})
    plans = dict(zip(ratios, make_missing_plan_ratio(
        bundle.dataset.num_items, bundle.num_modalities, ratios, bundle.spec.seed if bundle.spec else 0
    ))) if ratios else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, outputs = [], []
    for n, cell in enumerate(cells):
        cfg = base.replace(**{k: v for k, v in cell.items() if k != "missing_ratio"})
        validate_train_config(cfg)
        cell_bundle = with_plan(bundle, plans[cell["missing_ratio"]]) if "missing_ratio" in cell else bundle
        chash = config_hash(cfg)
        ctx, report = _train_one(cfg, cell_bundle, kind)
        records = evaluate_run(ctx, kind, cell_bundle, cfg.eval_ks, False, False, chash)
        for r in records:
            r["cell"] = n
            r.update({f"cell_{k}": v for k, v in cell.items()})
        name = f"cell_{n:03d}.jsonl"
        write_jsonl(out / name, records)
        outputs.append(name)
        rows.append((n, cell, report.test))
    header = ["cell", *sorted(cells[0]), *sorted(rows[0][2])]
    lines = ["\t".join(header)]
    for n, cell, test in rows:
        lines.append("\t".join([str(n), *(repr(cell[k]) for k in sorted(cell)),
                                *(f"{test[k]:.6f}" for k in sorted(test))]))
    (out / "summary.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    RunManifest(config_hash(base), base.seed, f"sweep {kind}", [str(args.config), str(args.grid), str(args.data)],
                [*outputs, "summary.tsv"], _now()).write(out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_all_terms

    results = check_all_terms(seed=args.seed or 0)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:10s} max_rel_err={err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print("PASS" if ok else "FAIL", f"worst={worst:.3e} tol={args.tol:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dgmrec", description="Disentangled multi-modal recommendation with missing-modality generation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="draw a synthetic corpus and write it to disk")
    g.add_argument("--spec", required=True, help="synthetic spec file (key = value)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, help="override the corpus seed")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train DGMRec or a baseline")
    t.add_argument("--config", required=True, help="training config file")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--ablation", choices=ABLATIONS, help="DGMRec variant")
    t.add_argument("--baseline", choices=BASELINES, help="train a baseline instead of DGMRec")
    t.add_argument("--max-epochs", type=int, help="override max_epochs")
    t.add_argument("--seed", type=int, help="override the training seed")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run")
    e.add_argument("--run", required=True, help="run directory from train")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--out", help="output directory (default: <run>/eval)")
    e.add_argument("--ks", default="20,50", help="comma-separated cutoffs")
    e.add_argument("--retrieval", action="store_true", help="add cross-modal Hit@10/Hit@20 records")
    e.add_argument("--diagnostics", action="store_true", help="add general/specific cosine diagnostics")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="train and evaluate every cell of a hyper-parameter grid")
    s.add_argument("--config", required=True, help="base training config")
    s.add_argument("--grid", required=True, help=f"grid file with keys among {', '.join(SWEEP_KEYS)}")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--baseline", choices=BASELINES, help="sweep a baseline instead of DGMRec")
    s.add_argument("--max-epochs", type=int, help="override max_epochs")
    s.add_argument("--seed", type=int, help="override the training seed")
    s.set_defaults(fn=cmd_sweep)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"dgmrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"dgmrec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"dgmrec: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
