"""Finite-difference checks of every objective term on a tiny float64 instance."""
from __future__ import annotations

import numpy as np
import torch

from . import losses as L
from .config import TrainConfig
from .datagen import SyntheticSpec, build_bundle
from .numcore import grad_check
from .trainer import (
    Batch, batch_objective, build_inputs, make_context, objective_parts, sample_triplets,
)

TERM_NAMES = (*L.TERMS, "total", "variational")


def tiny_problem(seed: int = 0, num_users: int = 10, num_items: int = 10):
    """Model, float64 inputs, one batch holding every training triplet, and frozen gen targets."""
    spec = SyntheticSpec(num_users=num_users, num_items=num_items, num_modalities=2, z_dim=3, s_dim=2,
                         modality_dims=(6, 5), interactions_per_user=4, noise=0.1, seed=seed)
    bundle = build_bundle(spec)
    cfg = TrainConfig(d=8, k=3, batch_size=1024, seed=seed, lambda1=0.5, lambda2=0.5, tau=0.5)
    ctx = make_context(cfg, bundle)
    model = ctx.model.double()
    # move the parameters off their init so the check is not at a special point
    with torch.no_grad():
        gen = torch.Generator().manual_seed(seed)
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    inp = build_inputs(ctx.ds, ctx.tables, ctx.graphs, cfg.num_layers, dtype=torch.float64)
    trip = torch.from_numpy(sample_triplets(ctx.ds, np.random.default_rng(seed)))
    batch = Batch(trip[:, 0], trip[:, 1], trip[:, 2])
    with torch.no_grad():
        out = model(inp)
        frozen = [(e.bar_general.clone(), e.bar_specific.clone()) for e in out.encodings]
    return model, inp, batch, cfg, frozen


def term_loss_fn(name: str, model, inp, batch, cfg, frozen):
    if name == "variational":
        with torch.no_grad():
            enc = model(inp).encodings
        pairs = [(e.bar_general.clone(), e.bar_specific.clone()) for e in enc]
        return lambda: sum(L.variational_nll(model.variational[m], g, s) for m, (g, s) in enumerate(pairs))
    if name == "total":
        return lambda: batch_objective(model, inp, batch, cfg, frozen_targets=frozen)[0]
    return lambda: objective_parts(model, inp, batch, cfg, terms=(name,), frozen_targets=frozen)[0][name]


def check_all_terms(seed: int = 0, h: float = 1e-4, num_coords: int = 150) -> dict[str, float]:
    """Max relative FD error per term.

    Encoder-side terms are checked against the main parameters (q is frozen
    inside the CLUB term by design); the variational NLL against q's own.
    """
    model, inp, batch, cfg, frozen = tiny_problem(seed)
    out = {}
    for name in TERM_NAMES:
        params = list(model.variational.parameters()) if name == "variational" else model.main_parameters()
        fn = term_loss_fn(name, model, inp, batch, cfg, frozen)
        out[name] = grad_check(fn, params, h=h, num_coords=num_coords, seed=seed)
    return out
