"""Objective terms and their weighted total."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch.func import functional_call
from torch.nn import functional as F

from .model import VariationalNet
from .numcore import adam_step

TERMS = ("bpr", "recon", "gen", "club", "infonce", "bm_align", "ui_align")


@dataclass
class LossBreakdown:
    bpr: float = 0.0
    recon: float = 0.0
    gen: float = 0.0
    club: float = 0.0
    infonce: float = 0.0
    bm_align: float = 0.0
    ui_align: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(**{k: getattr(self, k) + getattr(other, k) for k in self.as_dict()})

    def scaled(self, c: float) -> "LossBreakdown":
        return LossBreakdown(**{k: v * c for k, v in self.as_dict().items()})


def total_loss(parts: dict[str, torch.Tensor | float], lambda1: float, lambda2: float):
    """Weighted objective; absent parts count as zero.

    Returns ``(total, breakdown)`` where ``total`` keeps the autograd graph.
    """
    unknown = set(parts) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")

    def get(name):
        return parts.get(name, 0.0)

    total = (get("bpr") + get("recon") + get("gen")
             + lambda1 * (get("club") + get("infonce"))
             + lambda2 * (get("bm_align") + get("ui_align")))
    values = {k: float(torch.as_tensor(get(k)).detach()) for k in TERMS}
    return total, LossBreakdown(**values, total=float(torch.as_tensor(total).detach()))


def club_loss(q: VariationalNet, general: torch.Tensor, specific: torch.Tensor) -> torch.Tensor:
    """Sample-based CLUB estimate of I(general; specific) with q held fixed.

    Positive term: log q(g_i | s_i).  Negative term: mean over the batch j of
    log q(g_j | s_i), evaluated in closed form from the batch mean and
    variance of g.  Normalising constants and log-variances cancel.
    """
    frozen = {k: v.detach() for k, v in q.named_parameters()}
    mu, lv = functional_call(q, frozen, (specific,))
    inv_var = torch.exp(-lv)
    positive = -0.5 * ((general - mu) ** 2 * inv_var).sum(dim=-1)
    g_mean = general.mean(dim=0, keepdim=True)
    g_var = general.var(dim=0, unbiased=False, keepdim=True)
    negative = -0.5 * (((mu - g_mean) ** 2 + g_var) * inv_var).sum(dim=-1)
    return (positive - negative).mean()


def variational_nll(q: VariationalNet, general: torch.Tensor, specific: torch.Tensor) -> torch.Tensor:
    return -q.log_prob(general, specific).mean()


def fit_variational(q: VariationalNet, general: torch.Tensor, specific: torch.Tensor,
                    steps: int, opt: torch.optim.Optimizer) -> float:
    """Maximise mean log q(g | s) on detached encodings for ``steps`` Adam steps."""
    general, specific = general.detach(), specific.detach()
    nll = float("nan")
    for _ in range(steps):
        opt.zero_grad(set_to_none=False)
        loss = variational_nll(q, general, specific)
        loss.backward()
        adam_step(opt)
        nll = loss.item()
    return nll


def infonce(anchors: torch.Tensor, positives: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean over anchors of -log softmax_j(a_i · p_j / tau)[i], in-batch negatives."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = anchors @ positives.T / tau
    target = torch.arange(len(anchors), device=anchors.device)
    return F.cross_entropy(logits, target)


def _masked_mse(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if not mask.any():
        raise ValueError("no available items to compute the loss on")
    return ((a[mask] - b[mask]) ** 2).mean()


def recon_loss(X: torch.Tensor, X_bar: torch.Tensor, available: torch.Tensor) -> torch.Tensor:
    return _masked_mse(X, X_bar, available)


def gen_loss(bar_g, bar_s, gen_g, gen_s, available: torch.Tensor) -> torch.Tensor:
    """Generation error on available items; the encoder targets are detached."""
    return (_masked_mse(bar_g.detach(), gen_g, available)
            + _masked_mse(bar_s.detach(), gen_s, available))


def bm_align(user_id, user_fused, item_id, item_fused, tau: float) -> torch.Tensor:
    """Behaviour-modality alignment for the batch's (unique) users and items."""
    return infonce(user_id, user_fused, tau) + infonce(item_id, item_fused, tau)


def ui_align(user_feats: list[torch.Tensor], item_feats: list[torch.Tensor], tau: float) -> torch.Tensor:
    """Per-modality user/item InfoNCE over the batch's positive pairs, summed over modalities."""
    return sum(infonce(u, i, tau) for u, i in zip(user_feats, item_feats))


def bpr_loss(pos: torch.Tensor, neg: torch.Tensor, form: str = "standard") -> torch.Tensor:
    diff = pos - neg
    if form == "standard":
        return F.softplus(-diff).mean()
    if form == "paper_literal":
        return (-torch.sigmoid(diff)).mean()
    raise ValueError(f"unknown bpr form {form!r}")
