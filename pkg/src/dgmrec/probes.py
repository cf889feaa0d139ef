"""Synthetic estimator probes: CLUB on jointly Gaussian pairs."""
from __future__ import annotations

import numpy as np
import torch

from .losses import club_loss, fit_variational
from .model import VariationalNet
from .numcore import make_adam


def gaussian_pairs(n: int, d: int, rho: float, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """(s, g) with per-dimension correlation rho and unit variances."""
    s = torch.randn(n, d, generator=gen)
    g = rho * s + np.sqrt(1.0 - rho ** 2) * torch.randn(n, d, generator=gen)
    return s, g


def gaussian_mi_per_dim(rho: float) -> float:
    return 0.0 - 0.5 * float(np.log(1.0 - rho ** 2))


def club_gaussian_trial(rho: float, d: int = 4, n: int = 2048, steps: int = 500, lr: float = 0.01,
                        seed: int = 0, hidden: int = 16) -> float:
    """CLUB estimate per dimension after fitting q on one sample, evaluated on a fresh one."""
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    q = VariationalNet(d, hidden)
    s, g = gaussian_pairs(n, d, rho, gen)
    fit_variational(q, g, s, steps, make_adam(q.parameters(), lr))
    s, g = gaussian_pairs(n, d, rho, gen)
    with torch.no_grad():
        return float(club_loss(q, g, s)) / d
