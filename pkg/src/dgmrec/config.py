"""Flat ``key = value`` config files backed by dataclasses.

Every dataclass used as a config can be parsed from and written to the same
text format.  Values are typed from the dataclass field annotations; unknown
keys and missing required keys raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import dataclasses
import hashlib
import typing
from pathlib import Path
from typing import Any, TypeVar

T = TypeVar("T")

LAMBDA_GRID = (1.0, 0.1, 0.01, 0.001)
ALPHA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
TAU_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)
MISSING_RATIO_GRID = (0.0, 0.2, 0.4, 0.6, 0.8)

ABLATIONS = (
    "full",
    "no_disentangle",
    "no_club",
    "no_infonce",
    "no_generation",
    "no_recon",
    "no_gen_loss",
    "no_alignment",
    "no_ui_align",
    "no_bm_align",
)


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    d: int = 64
    k: int = 10
    num_layers: int = 2
    lambda1: float = 0.1
    lambda2: float = 0.1
    tau: float = 0.2
    alpha: float = 0.6
    lr: float = 1e-3
    q_lr: float = 1e-3
    batch_size: int = 2048
    gen_interval: int = 5
    patience: int = 30
    max_epochs: int = 1000
    seed: int = 0
    ablation: str = "full"
    bpr_form: str = "standard"
    # empty = take the modality dims from the data
    modality_dims: tuple[int, ...] = ()
    eval_ks: tuple[int, ...] = (20, 50)
    valid_k: int = 20

    def __post_init__(self):
        validate_train_config(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def validate_train_config(cfg: TrainConfig) -> None:
    if cfg.d <= 0:
        raise ConfigError(f"d must be positive, got {cfg.d}")
    if cfg.k <= 0:
        raise ConfigError(f"k must be positive, got {cfg.k}")
    if cfg.num_layers < 0:
        raise ConfigError(f"num_layers must be >= 0, got {cfg.num_layers}")
    for name in ("lambda1", "lambda2"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    if not 0.0 < cfg.tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {cfg.tau}")
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {cfg.alpha}")
    if cfg.lr <= 0 or cfg.q_lr <= 0:
        raise ConfigError("learning rates must be positive")
    if cfg.batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    if cfg.gen_interval < 1:
        raise ConfigError("gen_interval must be >= 1")
    if cfg.patience < 1:
        raise ConfigError("patience must be >= 1")
    if cfg.max_epochs < 1:
        raise ConfigError("max_epochs must be >= 1")
    if cfg.ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {cfg.ablation!r}; expected one of {ABLATIONS}")
    if cfg.bpr_form not in ("standard", "paper_literal"):
        raise ConfigError(f"unknown bpr_form {cfg.bpr_form!r}")
    if not cfg.eval_ks or any(k <= 0 for k in cfg.eval_ks):
        raise ConfigError("eval_ks must be a non-empty list of positive integers")


def _parse_value(raw: str, tp: Any, key: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is tuple:
        (inner, *_rest) = typing.get_args(tp)
        if raw in ("", "()"):
            return ()
        return tuple(_parse_value(p, inner, key) for p in raw.strip("()").split(",") if p.strip())
    try:
        if tp is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None
    return raw


def _format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"duplicate key {key!r}")
        out[key] = value
    return out


def from_kv(cls: type[T], values: dict[str, str], overrides: dict[str, Any] | None = None) -> T:
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    kwargs: dict[str, Any] = {k: _parse_value(v, hints[k], k) for k, v in values.items()}
    kwargs.update(overrides or {})
    for name, f in fields.items():
        if name not in kwargs and f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"missing required field {name!r}")
    return cls(**kwargs)


def load_config(cls: type[T], path: str | Path, **overrides: Any) -> T:
    return from_kv(cls, parse_kv(Path(path).read_text()), overrides)


def dump_config(obj: Any) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


def config_hash(obj: Any) -> str:
    """Hash of the canonical (sorted) key/value listing; independent of file key order."""
    items = sorted((f.name, _format_value(getattr(obj, f.name))) for f in dataclasses.fields(obj))
    canon = "\n".join(f"{k}={v}" for k, v in items)
    return hashlib.sha256(f"{type(obj).__name__}\n{canon}".encode()).hexdigest()[:16]
