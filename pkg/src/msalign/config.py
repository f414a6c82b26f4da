"""Hyperparameter containers and their flat ``key = value`` text form."""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError

ABLATIONS = ("base", "base_m", "base_m_a_b", "full")
MSCMAT_MODES = ("standard", "no_cls", "self_attn")
NEGATIVE_STRATEGIES = ("hardest", "sum_all")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    tau_cl: float = 0.1
    mu: float = 1.0
    alpha: float = 15.0
    beta: float = 10.0
    negative_strategy: str = "hardest"
    teacher_detached: bool = True

    def __post_init__(self):
        if not self.margin >= 0:
            raise ConfigurationError(f"margin must be >= 0, got {self.margin}")
        if not self.tau_cl > 0:
            raise ConfigurationError(f"tau_cl must be > 0, got {self.tau_cl}")
        if not self.mu > 0:
            raise ConfigurationError(f"mu must be > 0, got {self.mu}")
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ConfigurationError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.negative_strategy not in NEGATIVE_STRATEGIES:
            raise ConfigurationError(f"unknown negative_strategy {self.negative_strategy!r}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_scales: int = 4
    channels: int = 8
    image_size: int = 16
    scale_dims: tuple = (16, 32, 64, 128)
    embed_dim: int = 64
    text_len: int = 12
    vocab: int = 256
    heads: int = 8
    attn_temperature: typing.Optional[float] = None
    use_bias: bool = True
    init_std: float = 0.02
    patience: int = 10
    prefetch: bool = False
    ablation: str = "full"
    scale_mask: tuple = (True, True, True, True)
    mscmat_mode: str = "standard"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        object.__setattr__(self, "scale_dims", tuple(int(d) for d in self.scale_dims))
        object.__setattr__(self, "scale_mask", tuple(bool(s) for s in self.scale_mask))
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.n_scales < 2:
            raise ConfigurationError(f"n_scales must be >= 2, got {self.n_scales}")
        if len(self.scale_dims) != self.n_scales:
            raise ConfigurationError(
                f"scale_dims has {len(self.scale_dims)} entries for {self.n_scales} scales")
        if len(self.scale_mask) != self.n_scales:
            raise ConfigurationError(
                f"scale_mask has {len(self.scale_mask)} entries for {self.n_scales} scales")
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.image_size % 2 ** (self.n_scales - 1):
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by 2^{self.n_scales - 1}")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}")
        if self.mscmat_mode not in MSCMAT_MODES:
            raise ConfigurationError(f"unknown mscmat_mode {self.mscmat_mode!r}")
        if self.attn_temperature is not None and not self.attn_temperature > 0:
            raise ConfigurationError(f"attn_temperature must be > 0, got {self.attn_temperature}")

    @property
    def tau_attn(self) -> float:
        if self.attn_temperature is not None:
            return self.attn_temperature
        return math.sqrt(self.embed_dim / self.heads)

    def replace(self, **changes) -> "TrainConfig":
        loss_changes = {k[5:]: changes.pop(k) for k in list(changes) if k.startswith("loss.")}
        if loss_changes:
            changes["loss"] = dataclasses.replace(changes.get("loss", self.loss), **loss_changes)
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- text form

def _flat_fields(cls, prefix=""):
    hints = typing.get_type_hints(cls)
    for f in fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            yield from _flat_fields(tp, prefix + f.name + ".")
        else:
            yield prefix + f.name, tp


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse(key, tp, text, current):
    text = text.strip()
    try:
        if tp is bool:
            return _parse_bool(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if tp is tuple:
            parts = [p for p in text.split(",") if p.strip()]
            elem = type(current[0]) if current else float
            return tuple(_parse_bool(p) if elem is bool else elem(p.strip()) for p in parts)
        if typing.get_origin(tp) is typing.Union:
            if text.lower() == "none":
                return None
            inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
            return _parse(key, inner, text, current)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {exc}") from None
    raise ConfigurationError(f"unsupported field type for {key}")


def _get(cfg, key):
    obj = cfg
    for part in key.split("."):
        obj = getattr(obj, part)
    return obj


def config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{key} = {_format(_get(cfg, key))}\n" for key, _ in _flat_fields(TrainConfig))


def config_from_text(text: str, strict: bool = True) -> TrainConfig:
    """Parse ``key = value`` lines; with ``strict`` every key must be present."""
    known = dict(_flat_fields(TrainConfig))
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        values[key] = val
    missing = [k for k in known if k not in values]
    if strict and missing:
        raise ConfigurationError("missing config keys: " + ", ".join(missing))
    default = TrainConfig()
    changes = {k: _parse(k, known[k], v, _get(default, k)) for k, v in values.items()}
    return default.replace(**changes)
