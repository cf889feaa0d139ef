"""Small compute layer on top of torch: MLPs, Adam stepping, gradient checks, checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

LEAKY_SLOPE = 0.2
CKPT_MAGIC = b"CKPT"


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]  # input width followed by each layer's output width
    negative_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if min(self.widths) <= 0:
            raise ValueError("layer widths must be positive")


class Mlp(nn.Module):
    """Affine layers with leaky-ReLU between them and a linear output."""

    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(spec.widths, spec.widths[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mlp_forward(self, x)


def mlp_forward(mlp: Mlp, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != mlp.spec.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} != {mlp.spec.widths[0]}")
    *hidden, last = mlp.layers
    for layer in hidden:
        x = nn.functional.leaky_relu(layer(x), mlp.spec.negative_slope)
    return last(x)


def make_adam(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(opt: torch.optim.Optimizer) -> None:
    """Apply one bias-corrected Adam update, then zero the gradients."""
    opt.step()
    opt.zero_grad(set_to_none=False)


def check_finite(params, where: str = "") -> None:
    for p in params:
        if not torch.isfinite(p).all():
            raise NumericError(f"non-finite parameter values {where}")


def grad_check(loss_fn, params: list[torch.Tensor], h: float = 1e-3, num_coords: int = 100,
               seed: int = 0, analytic: list[torch.Tensor] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` must return a scalar built from ``params`` (which should be
    float64 leaves with ``requires_grad``).  ``analytic`` overrides the
    autograd gradients, which is how a deliberately wrong gradient is probed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError("loss is not finite at the check point")
    if analytic is None:
        analytic = torch.autograd.grad(loss, params, allow_unused=True)
        analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = np.arange(total) if total <= num_coords else rng.choice(total, num_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for fid in flat_ids:
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            idx = int(fid - offsets[k])
            flat = params[k].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = loss_fn().item()
            flat[idx] = orig - h
            down = loss_fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            exact = analytic[k].reshape(-1)[idx].item()
            scale = max(abs(numeric), abs(exact), 1e-6)
            worst = max(worst, abs(numeric - exact) / scale)
    return worst


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor | np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
            arr = np.array(arr, dtype="<f4", order="C")  # keeps 0-d shapes
            raw = name.encode()
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode()
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
        pos += 4 * size
    return out
