"""Training loop, ablations, baselines and the scheduled generation/refinement step."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import losses as L
from .config import ABLATIONS, TrainConfig
from .datagen import DatasetBundle, InteractionDataset, ModalityTable, impute_baseline
from .evaluate import cross_modal_hit, disentangle_diagnostics, evaluate_scores
from .graph import SparseItemGraph, build_knn_graph, build_refinement_graph, normalize, refine
from .model import DGMRec, ForwardOutput, ModelInputs, sparse_mean_operator
from .numcore import NumericError, adam_step, check_finite, make_adam

log = logging.getLogger(__name__)

BASELINES = ("mf_bpr", "lightgcn", "dgmrec_nn_inject")

ABLATED_TERMS = {
    "full": (),
    "no_disentangle": ("club", "infonce"),
    "no_club": ("club",),
    "no_infonce": ("infonce",),
    "no_generation": (),
    "no_recon": ("recon",),
    "no_gen_loss": ("gen",),
    "no_alignment": ("bm_align", "ui_align"),
    "no_ui_align": ("ui_align",),
    "no_bm_align": ("bm_align",),
}


def active_terms(ablation: str) -> tuple[str, ...]:
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation flag {ablation!r}")
    dropped = ABLATED_TERMS[ablation]
    return tuple(t for t in L.TERMS if t not in dropped)


@dataclass
class Batch:
    users: torch.Tensor
    pos: torch.Tensor
    neg: torch.Tensor

    @property
    def unique_users(self) -> torch.Tensor:
        return torch.unique(self.users)

    @property
    def unique_items(self) -> torch.Tensor:
        return torch.unique(self.pos)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid: float = float("-inf")
    wall_time: float = 0.0
    test: dict[str, float] = field(default_factory=dict)
    valid: dict[str, float] = field(default_factory=dict)
    generation_epochs: list[int] = field(default_factory=list)
    stopped_early: bool = False


@dataclass
class TrainContext:
    """Mutable state of one DGMRec training run (or its best snapshot)."""

    model: nn.Module
    tables: list[ModalityTable]
    graphs: list[SparseItemGraph]
    ds: InteractionDataset
    config: TrainConfig

    def inputs(self) -> ModelInputs:
        return build_inputs(self.ds, self.tables, self.graphs, self.config.num_layers)


def interaction_operators(ds: InteractionDataset, dtype=torch.float32):
    tr = ds.train
    item_user = sparse_mean_operator(tr[:, 1], tr[:, 0], (ds.num_items, ds.num_users), dtype)
    user_item = sparse_mean_operator(tr[:, 0], tr[:, 1], (ds.num_users, ds.num_items), dtype)
    cold = torch.from_numpy(ds.item_degree("train") == 0)
    return item_user, user_item, cold


def build_inputs(ds: InteractionDataset, tables: list[ModalityTable], graphs: list[SparseItemGraph],
                 num_layers: int, dtype=torch.float32) -> ModelInputs:
    item_user, user_item, cold = interaction_operators(ds, dtype)
    return ModelInputs(
        features=[torch.from_numpy(t.features).to(dtype) for t in tables],
        graphs=[g.to_torch(dtype) for g in graphs],
        available=[torch.from_numpy(t.available) for t in tables],
        item_user=item_user,
        user_item=user_item,
        cold_items=cold,
        num_layers=num_layers,
    )


def initial_graphs(tables: list[ModalityTable], k: int) -> list[SparseItemGraph]:
    """k-NN graph per modality; only available items act as neighbours."""
    return [normalize(build_knn_graph(t.features, k, candidates=t.available)) for t in tables]


def objective_parts(model: DGMRec, inp: ModelInputs, batch: Batch, cfg: TrainConfig,
                    terms=None, out: ForwardOutput | None = None,
                    frozen_targets=None) -> tuple[dict[str, torch.Tensor], ForwardOutput]:
    """Unweighted loss terms for one batch (``bpr`` is always present).

    ``frozen_targets`` (per-modality ``(bar_g, bar_s)``) replaces the
    detached generation targets by constants; gradient checks need this so
    that finite differences see the same function autograd differentiates.
    """
    terms = active_terms(cfg.ablation) if terms is None else terms
    out = model(inp) if out is None else out
    enc = out.encodings
    items = batch.unique_items
    parts: dict[str, torch.Tensor] = {}
    pos = (out.user_final[batch.users] * out.item_final[batch.pos]).sum(-1)
    neg = (out.user_final[batch.users] * out.item_final[batch.neg]).sum(-1)
    parts["bpr"] = L.bpr_loss(pos, neg, cfg.bpr_form)
    # recon / gen: the batch's items that have modality m
    has = [inp.available[m][items].any() for m in range(len(enc))]
    if "recon" in terms:
        parts["recon"] = sum(
            L.recon_loss(inp.features[m][items],
                         model.decode(m, e.bar_general[items], e.bar_specific[items]), inp.available[m][items])
            for m, e in enumerate(enc) if has[m]
        )
    if "gen" in terms:
        generated = model.generate(out, inp, items)
        gen = 0.0
        for m, (e, (g_hat, s_hat)) in enumerate(zip(enc, generated)):
            if not has[m]:
                continue
            tg, ts = (e.bar_general, e.bar_specific) if frozen_targets is None else frozen_targets[m]
            gen = gen + L.gen_loss(tg[items], ts[items], g_hat, s_hat, inp.available[m][items])
        parts["gen"] = gen
    if "club" in terms:
        parts["club"] = sum(
            L.club_loss(model.variational[m], e.bar_general[items], e.bar_specific[items])
            for m, e in enumerate(enc)
        )
    if "infonce" in terms:
        M = len(enc)
        parts["infonce"] = sum(
            L.infonce(enc[a].bar_general[items], enc[b].bar_general[items], cfg.tau)
            for a in range(M) for b in range(a + 1, M)
        )
    if "bm_align" in terms:
        users = batch.unique_users
        parts["bm_align"] = L.bm_align(model.user_id[users], out.user_fused[users],
                                       model.item_id[items], out.item_fused[items], cfg.tau)
    if "ui_align" in terms:
        parts["ui_align"] = L.ui_align(
            [e.user_repr[batch.users] for e in enc], [e.item_repr[batch.pos] for e in enc], cfg.tau
        )
    return parts, out


def batch_objective(model: DGMRec, inp: ModelInputs, batch: Batch, cfg: TrainConfig,
                    terms=None, out: ForwardOutput | None = None,
                    frozen_targets=None) -> tuple[torch.Tensor, L.LossBreakdown, ForwardOutput]:
    """Weighted objective for one batch; see :func:`objective_parts`."""
    parts, out = objective_parts(model, inp, batch, cfg, terms, out, frozen_targets)
    total, breakdown = L.total_loss(parts, cfg.lambda1, cfg.lambda2)
    return total, breakdown, out


def sample_triplets(ds: InteractionDataset, rng: np.random.Generator,
                    exclude_items: np.ndarray | None = None) -> np.ndarray:
    """One uniform negative per training pair, never a training item of that user."""
    tr = ds.train
    n_items = ds.num_items
    allowed = np.ones(n_items, dtype=bool) if exclude_items is None else ~exclude_items
    allowed_ids = np.flatnonzero(allowed)
    seen = np.sort(tr[:, 0] * n_items + tr[:, 1])
    neg = allowed_ids[rng.integers(0, len(allowed_ids), len(tr))]
    bad = np.flatnonzero(np.isin(tr[:, 0] * n_items + neg, seen, assume_unique=False))
    while len(bad):
        neg[bad] = allowed_ids[rng.integers(0, len(allowed_ids), len(bad))]
        still = np.isin(tr[bad, 0] * n_items + neg[bad], seen)
        bad = bad[still]
    trip = np.column_stack([tr, neg])
    return trip[rng.permutation(len(trip))]


def iter_batches(triplets: np.ndarray, batch_size: int):
    for lo in range(0, len(triplets), batch_size):
        t = torch.from_numpy(triplets[lo:lo + batch_size])
        yield Batch(t[:, 0], t[:, 1], t[:, 2])


@torch.no_grad()
def run_generation(ctx: TrainContext) -> None:
    """Generate raw features for missing entries, write them back and refine the graphs."""
    model = ctx.model
    inp = ctx.inputs()
    out = model(inp)
    generated = model.generate(out, inp)
    for m, (table, (g_hat, s_hat)) in enumerate(zip(ctx.tables, generated)):
        missing = ~table.available
        if not missing.any() or not table.available.any():
            continue
        x_hat = model.generate_raw(m, g_hat, s_hat).numpy()
        before = table.features[table.available].copy()
        table.features[missing] = x_hat[missing]
        assert np.array_equal(before, table.features[table.available]), "generation touched available rows"
        s_hat_graph = build_refinement_graph(table.features, table.available, ctx.config.k)
        ctx.graphs[m] = refine(ctx.graphs[m], s_hat_graph, ctx.config.alpha, np.flatnonzero(missing))


def generated_raw_features(ctx: TrainContext) -> list[np.ndarray]:
    """Decoder output from generated features for every item (no write-back)."""
    with torch.no_grad():
        inp = ctx.inputs()
        out = ctx.model(inp)
        return [ctx.model.generate_raw(m, g, s).numpy() for m, (g, s) in enumerate(ctx.model.generate(out, inp))]


def snapshot(ctx: TrainContext) -> TrainContext:
    return TrainContext(copy.deepcopy(ctx.model), [t.copy() for t in ctx.tables],
                        [g.copy() for g in ctx.graphs], ctx.ds, ctx.config)


def model_scores(model: nn.Module, inp: ModelInputs) -> np.ndarray:
    with torch.no_grad():
        out = model(inp)
        return (out.user_final @ out.item_final.T).numpy()


def _check_bundle(cfg: TrainConfig, bundle: DatasetBundle) -> None:
    dims = tuple(t.dim for t in bundle.tables)
    if cfg.modality_dims and tuple(cfg.modality_dims) != dims:
        raise ValueError(f"config modality_dims {cfg.modality_dims} do not match data {dims}")


def _fit(ctx: TrainContext, cfg: TrainConfig, step_fn, generation: bool, on_epoch=None) -> TrainReport:
    """Shared epoch loop with validation-based early stopping.

    ``on_epoch(ctx, record)`` runs after each epoch's validation, before the
    early-stopping decision; whatever it returns is stored under ``record["extra"]``.
    """
    report = TrainReport()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    start = time.perf_counter()
    best = snapshot(ctx)
    stale = 0
    new_items = ctx.ds.new_item_flags
    for epoch in range(1, cfg.max_epochs + 1):
        ctx.model.train()
        inp = ctx.inputs()
        triplets = sample_triplets(ctx.ds, rng, exclude_items=new_items)
        sums, n = L.LossBreakdown(), 0
        for batch in iter_batches(triplets, cfg.batch_size):
            breakdown = step_fn(inp, batch)
            if not np.isfinite(breakdown.total):
                raise NumericError(f"non-finite loss at epoch {epoch}: {breakdown}")
            sums, n = sums + breakdown, n + 1
        if generation and epoch % cfg.gen_interval == 0:
            run_generation(ctx)
            report.generation_epochs.append(epoch)
        ctx.model.eval()
        valid = evaluate_scores(model_scores(ctx.model, ctx.inputs()), ctx.ds, "valid", (cfg.valid_k,))
        metric = valid.get(f"recall@{cfg.valid_k}", float("nan"))
        record = {"epoch": epoch, **sums.scaled(1.0 / max(n, 1)).as_dict(),
                  f"valid_recall@{cfg.valid_k}": metric, f"valid_ndcg@{cfg.valid_k}": valid.get(f"ndcg@{cfg.valid_k}")}
        if on_epoch is not None:
            record["extra"] = on_epoch(ctx, record)
        report.epochs.append(record)
        log.debug("epoch %d %s", epoch, record)
        if metric > report.best_valid:
            report.best_valid, report.best_epoch, stale = metric, epoch, 0
            best = snapshot(ctx)
        else:
            stale += 1
            if stale >= cfg.patience:
                report.stopped_early = True
                break
    ctx.model.load_state_dict(best.model.state_dict())
    ctx.tables[:] = best.tables
    ctx.graphs[:] = best.graphs
    ctx.model.eval()
    scores = model_scores(ctx.model, ctx.inputs())
    report.valid = evaluate_scores(scores, ctx.ds, "valid", cfg.eval_ks)
    report.test = evaluate_scores(scores, ctx.ds, "test", cfg.eval_ks)
    report.wall_time = time.perf_counter() - start
    return report


def make_context(cfg: TrainConfig, bundle: DatasetBundle, tables: list[ModalityTable] | None = None) -> TrainContext:
    _check_bundle(cfg, bundle)
    torch.manual_seed(cfg.seed)
    tables = [t.copy() for t in (tables or bundle.tables)]
    ds = bundle.dataset
    model = DGMRec(ds.num_users, ds.num_items, tuple(t.dim for t in tables), d=cfg.d)
    return TrainContext(model, tables, initial_graphs(tables, cfg.k), ds, cfg)


def _dgmrec_step(ctx: TrainContext, cfg: TrainConfig):
    model = ctx.model
    opt = make_adam(model.main_parameters(), cfg.lr)
    q_opt = make_adam(model.variational.parameters(), cfg.q_lr)
    terms = active_terms(cfg.ablation)
    params = list(model.parameters())

    def step(inp: ModelInputs, batch: Batch) -> L.LossBreakdown:
        out = model(inp)
        if "club" in terms:
            items = batch.unique_items
            q_opt.zero_grad(set_to_none=False)
            nll = sum(L.variational_nll(model.variational[m], e.bar_general[items].detach(),
                                        e.bar_specific[items].detach())
                      for m, e in enumerate(out.encodings))
            nll.backward()
            adam_step(q_opt)
        total, breakdown, _ = batch_objective(model, inp, batch, cfg, terms, out=out)
        opt.zero_grad(set_to_none=False)
        total.backward()
        adam_step(opt)
        check_finite(params, "after optimizer step")
        return breakdown

    return step


def train(cfg: TrainConfig, bundle: DatasetBundle, tables: list[ModalityTable] | None = None,
          generation: bool | None = None, on_epoch=None) -> tuple[TrainContext, TrainReport]:
    """Train DGMRec; returns the best-validation context and its report."""
    ctx = make_context(cfg, bundle, tables)
    if generation is None:
        generation = cfg.ablation != "no_generation"
    report = _fit(ctx, cfg, _dgmrec_step(ctx, cfg), generation, on_epoch)
    return ctx, report


def run_ablation(cfg: TrainConfig, bundle: DatasetBundle, flag: str) -> TrainReport:
    if flag not in ABLATIONS:
        raise ValueError(f"unknown ablation flag {flag!r}")
    return train(cfg.replace(ablation=flag), bundle)[1]


class MatrixFactorization(nn.Module):
    def __init__(self, num_users: int, num_items: int, d: int):
        super().__init__()
        self.num_users = num_users
        self.id_embedding = nn.Parameter(torch.empty(num_users + num_items, d))
        nn.init.xavier_uniform_(self.id_embedding)

    def forward(self, inp) -> ForwardOutput:
        e = self.id_embedding
        return ForwardOutput([], None, None, e[self.num_users:], e[: self.num_users])


class LightGCN(MatrixFactorization):
    """Bipartite propagation with symmetric normalisation and layer-mean readout."""

    def __init__(self, num_users: int, num_items: int, d: int, num_layers: int, train_pairs: np.ndarray):
        super().__init__(num_users, num_items, d)
        self.num_layers = num_layers
        n = num_users + num_items
        rows = np.concatenate([train_pairs[:, 0], train_pairs[:, 1] + num_users])
        cols = np.concatenate([train_pairs[:, 1] + num_users, train_pairs[:, 0]])
        deg = np.bincount(rows, minlength=n).astype(np.float64)
        inv = np.where(deg > 0, deg, 1.0) ** -0.5
        vals = inv[rows] * inv[cols]
        idx = torch.from_numpy(np.vstack([rows, cols]).astype(np.int64))
        self.adj = torch.sparse_coo_tensor(idx, torch.from_numpy(vals).float(), (n, n), check_invariants=False).coalesce()

    def forward(self, inp) -> ForwardOutput:
        layers = [self.id_embedding]
        for _ in range(self.num_layers):
            layers.append(torch.sparse.mm(self.adj, layers[-1]))
        e = torch.stack(layers).mean(dim=0)
        return ForwardOutput([], None, None, e[self.num_users:], e[: self.num_users])


def _cf_step(model: nn.Module, cfg: TrainConfig):
    opt = make_adam(model.parameters(), cfg.lr)

    def step(inp, batch: Batch) -> L.LossBreakdown:
        out = model(inp)
        pos = (out.user_final[batch.users] * out.item_final[batch.pos]).sum(-1)
        neg = (out.user_final[batch.users] * out.item_final[batch.neg]).sum(-1)
        total, breakdown = L.total_loss({"bpr": L.bpr_loss(pos, neg, cfg.bpr_form)}, 0.0, 0.0)
        opt.zero_grad(set_to_none=False)
        total.backward()
        adam_step(opt)
        return breakdown

    return step


class _CFContext(TrainContext):
    def inputs(self):
        return None


def nn_injected_tables(bundle: DatasetBundle) -> list[ModalityTable]:
    return [impute_baseline(t, bundle.dataset, "nn_mean") if t.available.any() else t.copy()
            for t in bundle.tables]


def train_baseline(kind: str, cfg: TrainConfig, bundle: DatasetBundle,
                   on_epoch=None) -> tuple[TrainContext, TrainReport]:
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    if kind == "dgmrec_nn_inject":
        return train(cfg, bundle, tables=nn_injected_tables(bundle), generation=False, on_epoch=on_epoch)
    torch.manual_seed(cfg.seed)
    ds = bundle.dataset
    if kind == "mf_bpr":
        model = MatrixFactorization(ds.num_users, ds.num_items, cfg.d)
    else:
        model = LightGCN(ds.num_users, ds.num_items, cfg.d, cfg.num_layers, ds.train)
    ctx = _CFContext(model, [], [], ds, cfg)
    report = _fit(ctx, cfg, _cf_step(model, cfg), generation=False, on_epoch=on_epoch)
    return ctx, report


def encoding_diagnostics(ctx: TrainContext, shared_latent: np.ndarray | None = None) -> dict[str, float]:
    """Cosine diagnostics of the propagated general/specific encodings of every item."""
    with torch.no_grad():
        out = ctx.model(ctx.inputs())
    general = [e.bar_general.numpy() for e in out.encodings]
    specific = [e.bar_specific.numpy() for e in out.encodings]
    return disentangle_diagnostics(general, specific, shared_latent)


def retrieval_report(ctx: TrainContext, bundle: DatasetBundle, ks=(10, 20)) -> dict[str, dict[int, dict[str, float]]]:
    """Hit@K for generated queries and for the projected nearest-neighbour query."""
    if bundle.truth is None:
        raise ValueError("cross-modal retrieval needs the ground-truth tables")
    generated = generated_raw_features(ctx)
    with torch.no_grad():
        projected = [ctx.model.proj[m](torch.from_numpy(t.features)).numpy()
                     for m, t in enumerate(bundle.truth)]
    return {
        "generated": cross_modal_hit(bundle.plan, bundle.truth, ks, generated=generated),
        "nn": cross_modal_hit(bundle.plan, bundle.truth, ks, projected=projected),
    }
