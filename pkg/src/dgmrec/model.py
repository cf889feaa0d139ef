"""Learnable components: encoders, preference gating, decoders, generators, fusion, scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .graph import propagate
from .numcore import Mlp, MlpSpec


@dataclass
class ModelInputs:
    """Per-forward constants: current feature tables, graphs and aggregation operators."""

    features: list[torch.Tensor]  # (items, d_m) per modality
    graphs: list[torch.Tensor]  # sparse (items, items) per modality
    available: list[torch.Tensor]  # bool (items,) per modality
    item_user: torch.Tensor  # sparse (items, users), rows average over training users
    user_item: torch.Tensor  # sparse (users, items), rows average over training items
    cold_items: torch.Tensor  # bool (items,), items without training users
    num_layers: int


@dataclass
class ModalityEncoding:
    general: torch.Tensor
    specific: torch.Tensor
    gated_general: torch.Tensor
    gated_specific: torch.Tensor
    bar_general: torch.Tensor  # propagated, (items, d)
    bar_specific: torch.Tensor
    user_general: torch.Tensor  # (users, d)
    user_specific: torch.Tensor
    item_pref: torch.Tensor  # P_i for this modality

    @property
    def item_repr(self) -> torch.Tensor:
        return mean_pool(self.bar_specific, self.bar_general)

    @property
    def user_repr(self) -> torch.Tensor:
        return mean_pool(self.user_specific, self.user_general)


@dataclass
class ForwardOutput:
    encodings: list[ModalityEncoding]
    item_fused: torch.Tensor  # Ē_M
    user_fused: torch.Tensor  # F̄_M
    item_final: torch.Tensor
    user_final: torch.Tensor


def mean_pool(*tensors: torch.Tensor) -> torch.Tensor:
    return torch.stack(tensors).mean(dim=0)


def sparse_mean_operator(rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int],
                         dtype=torch.float32) -> torch.Tensor:
    """Sparse matrix whose row r averages the columns paired with r (empty rows stay zero)."""
    deg = np.bincount(rows, minlength=shape[0]).astype(np.float64)
    vals = 1.0 / deg[rows]
    idx = torch.from_numpy(np.vstack([rows, cols]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.from_numpy(vals).to(dtype), shape, check_invariants=False).coalesce()


def item_preference(user_pref: torch.Tensor, item_user: torch.Tensor,
                    cold_items: torch.Tensor) -> torch.Tensor:
    """Mean preference of each item's training users; cold items get the global user mean."""
    p = torch.sparse.mm(item_user, user_pref)
    if cold_items.any():
        p = torch.where(cold_items[:, None], user_pref.mean(dim=0, keepdim=True), p)
    return p


def gate(E: torch.Tensor, item_pref: torch.Tensor) -> torch.Tensor:
    return E * torch.sigmoid(item_pref)


def user_features(item_feats: torch.Tensor, user_item: torch.Tensor) -> torch.Tensor:
    return torch.sparse.mm(user_item, item_feats)


def fuse(item_general, item_specific, user_general, user_specific):
    """Mean over modalities of MeanPool(specific_m, mean-of-generals), item and user side."""
    g_item = mean_pool(*item_general)
    g_user = mean_pool(*user_general)
    item = mean_pool(*(mean_pool(s, g_item) for s in item_specific))
    user = mean_pool(*(mean_pool(s, g_user) for s in user_specific))
    return item, user


class VariationalNet(nn.Module):
    """Diagonal Gaussian q(general | specific): 2-layer mean and log-variance heads."""

    LOGVAR_CLAMP = 8.0

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.mean = Mlp(MlpSpec((d, hidden, d)))
        self.logvar = Mlp(MlpSpec((d, hidden, d)))

    def forward(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        lv = self.logvar(cond).clamp(-self.LOGVAR_CLAMP, self.LOGVAR_CLAMP)
        return self.mean(cond), lv

    def log_prob(self, target: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        mu, lv = self(cond)
        return -0.5 * (((target - mu) ** 2) / lv.exp() + lv + np.log(2 * np.pi)).sum(dim=-1)


class DGMRec(nn.Module):
    def __init__(self, num_users: int, num_items: int, modality_dims: tuple[int, ...],
                 d: int = 64, hidden: int | None = None):
        super().__init__()
        if len(modality_dims) < 2:
            raise ValueError("the model needs at least two modalities")
        self.num_users = num_users
        self.num_items = num_items
        self.modality_dims = tuple(modality_dims)
        self.d = d
        M = len(modality_dims)
        hidden = hidden or d
        self.id_embedding = nn.Parameter(torch.empty(num_users + num_items, d))
        self.user_pref = nn.ParameterList(nn.Parameter(torch.empty(num_users, d)) for _ in range(M))
        self.proj = nn.ModuleList(nn.Linear(d_m, d) for d_m in modality_dims)
        self.general_encoder = nn.Linear(d, d)
        self.specific_encoders = nn.ModuleList(nn.Linear(d_m, d) for d_m in modality_dims)
        self.decoders = nn.ModuleList(Mlp(MlpSpec((2 * d, hidden, d_m))) for d_m in modality_dims)
        self.general_generators = nn.ModuleList(Mlp(MlpSpec(((M - 1) * d, hidden, d))) for _ in range(M))
        self.specific_generators = nn.ModuleList(Mlp(MlpSpec((d, hidden, d))) for _ in range(M))
        self.variational = nn.ModuleList(VariationalNet(d, hidden) for _ in range(M))
        nn.init.xavier_uniform_(self.id_embedding)
        for p in self.user_pref:
            nn.init.xavier_uniform_(p)

    @property
    def num_modalities(self) -> int:
        return len(self.modality_dims)

    @property
    def user_id(self) -> torch.Tensor:
        return self.id_embedding[: self.num_users]

    @property
    def item_id(self) -> torch.Tensor:
        return self.id_embedding[self.num_users:]

    def main_parameters(self) -> list[nn.Parameter]:
        """Everything except the variational nets, which have their own optimizer."""
        q_ids = {id(p) for p in self.variational.parameters()}
        return [p for p in self.parameters() if id(p) not in q_ids]

    def encode(self, m: int, X: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if X.shape[-1] != self.modality_dims[m]:
            raise ValueError(f"modality {m} expects width {self.modality_dims[m]}, got {X.shape[-1]}")
        return self.general_encoder(self.proj[m](X)), self.specific_encoders[m](X)

    def decode(self, m: int, general: torch.Tensor, specific: torch.Tensor) -> torch.Tensor:
        return self.decoders[m](torch.cat([general, specific], dim=-1))

    def generate_general(self, m: int, bar_general: list[torch.Tensor],
                         available: list[torch.Tensor], items: torch.Tensor | None = None) -> torch.Tensor:
        """Ê_g for modality m from the other modalities' general features.

        Rows whose source modality is missing use that modality's mean over
        available items instead.  ``items`` restricts the output rows.
        """
        parts = []
        for mm, (feats, avail) in enumerate(zip(bar_general, available)):
            if mm == m:
                continue
            fill = feats[avail].mean(dim=0, keepdim=True) if avail.any() else torch.zeros_like(feats[:1])
            if items is not None:
                feats, avail = feats[items], avail[items]
            parts.append(feats if avail.all() else torch.where(avail[:, None], feats, fill))
        return self.general_generators[m](torch.cat(parts, dim=-1))

    def generate_specific(self, m: int, item_pref: torch.Tensor) -> torch.Tensor:
        return self.specific_generators[m](item_pref)

    def generate_raw(self, m: int, gen_general: torch.Tensor, gen_specific: torch.Tensor) -> torch.Tensor:
        return self.decode(m, gen_general, gen_specific)

    def forward(self, inp: ModelInputs) -> ForwardOutput:
        encodings = []
        for m in range(self.num_modalities):
            E_g, E_s = self.encode(m, inp.features[m])
            P_i = item_preference(self.user_pref[m], inp.item_user, inp.cold_items)
            gated_g, gated_s = gate(E_g, P_i), gate(E_s, P_i)
            bar_g = propagate(inp.graphs[m], gated_g, inp.num_layers)
            bar_s = propagate(inp.graphs[m], gated_s, inp.num_layers)
            encodings.append(ModalityEncoding(
                E_g, E_s, gated_g, gated_s, bar_g, bar_s,
                user_features(bar_g, inp.user_item), user_features(bar_s, inp.user_item), P_i,
            ))
        item_fused, user_fused = fuse(
            [e.bar_general for e in encodings], [e.bar_specific for e in encodings],
            [e.user_general for e in encodings], [e.user_specific for e in encodings],
        )
        return ForwardOutput(
            encodings, item_fused, user_fused,
            self.item_id + item_fused, self.user_id + user_fused,
        )

    def generate(self, out: ForwardOutput, inp: ModelInputs,
                 items: torch.Tensor | None = None) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Generated (general, specific) features per modality for every item (or ``items``)."""
        bar_g = [e.bar_general for e in out.encodings]
        return [
            (self.generate_general(m, bar_g, inp.available, items),
             self.generate_specific(m, e.item_pref if items is None else e.item_pref[items]))
            for m, e in enumerate(out.encodings)
        ]


def score(out: ForwardOutput, users, items) -> torch.Tensor:
    users = torch.as_tensor(users)
    items = torch.as_tensor(items)
    if users.max() >= out.user_final.shape[0] or items.max() >= out.item_final.shape[0]:
        raise IndexError("user or item id out of range")
    return (out.user_final[users] * out.item_final[items]).sum(dim=-1)


def all_scores(out: ForwardOutput) -> torch.Tensor:
    return out.user_final @ out.item_final.T


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(a, b, dim=-1)
