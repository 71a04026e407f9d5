"""Configuration records and the flat ``section.key`` document they map to.

Every leaf value is addressable by a dotted key (``fusion.n_blocks``,
``loss.weights.cmr``) so config files and ``--set`` overrides share one
namespace.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple

import yaml

CONFIG_ENV_VAR = "MRDF_CONFIG"


@dataclass
class FrontendConfig:
    ratio: int = 4
    n_mels: int = 80
    hop_ms: float = 10.0
    win_ms: float = 25.0
    sample_rate: int = 16000


@dataclass
class EncoderConfig:
    arch: str = "resnet18_style"  # or "small_mlp"
    out_dim: int = 512
    input_shape: Tuple[int, ...] = (80,)
    hidden_dim: int = 256
    bias: bool = True

    def __post_init__(self):
        if self.arch not in ("resnet18_style", "small_mlp"):
            raise ValueError(f"unknown encoder arch {self.arch!r}")
        if self.out_dim < 1:
            raise ValueError("encoder out_dim must be >= 1")
        self.input_shape = tuple(int(s) for s in self.input_shape)


@dataclass
class FusionConfig:
    embed_dim: int = 512  # shared width of the unimodal projectors
    model_dim: int = 768
    n_blocks: int = 12
    n_heads: int = 12
    ff_dim: int = 3072
    dropout: float = 0.1
    max_len: int = 512
    pool: str = "mean"

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")


@dataclass
class ModelConfig:
    audio: EncoderConfig = field(default_factory=lambda: EncoderConfig(input_shape=(320,)))
    visual: EncoderConfig = field(default_factory=lambda: EncoderConfig(input_shape=(88, 88, 1)))
    fusion: FusionConfig = field(default_factory=FusionConfig)


@dataclass
class WeightConfig:
    ce: float = 1.0
    cmr: float = 1.0
    wmr: float = 1.0

    def __post_init__(self):
        if min(self.ce, self.cmr, self.wmr) < 0:
            raise ValueError("loss weights must be nonnegative")
        if max(self.ce, self.cmr, self.wmr) <= 0:
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.ce, self.cmr, self.wmr)


@dataclass
class MarginConfig:
    alpha_a: float = 0.0
    alpha_v: float = 0.0

    def __post_init__(self):
        for a in (self.alpha_a, self.alpha_v):
            if not -1.0 <= a <= 1.0:
                raise ValueError("margins must lie in [-1, 1]")


@dataclass
class LossConfig:
    variant: str = "ce"  # margin | ce | baseline
    weights: WeightConfig = field(default_factory=WeightConfig)
    margin: MarginConfig = field(default_factory=MarginConfig)
    reduction: str = "mean"
    wmr_ce_target: str = "modality"
    pairing_policy: str = "any_fake_negative"

    def __post_init__(self):
        if self.variant not in ("margin", "ce", "baseline"):
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.wmr_ce_target not in ("modality", "multimodal"):
            raise ValueError(f"unknown wmr_ce_target {self.wmr_ce_target!r}")

    def effective_weights(self) -> Tuple[float, float, float]:
        if self.variant == "baseline":
            return (self.weights.ce, 0.0, 0.0)
        return self.weights.as_tuple()


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_schedule: str = "constant"  # or "cosine"
    seed: int = 0
    stratified_batches: bool = False
    val_fraction: float = 0.1
    checkpoint_every_epoch: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for pairwise losses")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.betas = tuple(float(b) for b in self.betas)


@dataclass
class EvalConfig:
    k: int = 5
    split_seed: int = 0
    perplexity: float = 30.0


@dataclass
class Config:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def flatten(cfg: Any, prefix: str = "") -> Dict[str, Any]:
    """Dotted-key view of a nested config dataclass."""
    out: Dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(flatten(value, key + "."))
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def _coerce(current: Any, raw: Any) -> Any:
    if isinstance(raw, str):
        if isinstance(current, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(current, (int, float, tuple, list)):
            raw = yaml.safe_load(raw)
    if isinstance(current, bool):
        return bool(raw)
    if isinstance(current, int):
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        if not isinstance(raw, (list, tuple)):
            raw = [raw]
        return tuple(raw)
    return raw


def apply_overrides(cfg: Config, overrides: Dict[str, Any]) -> Config:
    """Return a new config with dotted-key overrides applied and validated."""
    tree = dataclasses.asdict(cfg)
    known = flatten(cfg)
    for key, raw in overrides.items():
        if key not in known:
            raise KeyError(f"unknown config key {key!r}")
        node = tree
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        current = getattr_dotted(cfg, key)
        node[leaf] = _coerce(current, raw)
    return from_dict(tree)


def getattr_dotted(cfg: Any, key: str) -> Any:
    for part in key.split("."):
        cfg = getattr(cfg, part)
    return cfg


def _build(cls, data: Dict[str, Any]):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        sub = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            value = _build(type(sub), {**dataclasses.asdict(sub), **value})
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def from_dict(tree: Dict[str, Any]) -> Config:
    return _build(Config, tree)


def load_config(path: str | os.PathLike | None = None) -> Config:
    """Read a flat ``key: value`` YAML document; falls back to $MRDF_CONFIG."""
    path = path or os.environ.get(CONFIG_ENV_VAR)
    cfg = Config()
    if not path:
        return cfg
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a key-value mapping")
    return apply_overrides(cfg, doc)


def save_config(cfg: Config, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(flatten(cfg), fh, sort_keys=True)


def tiny_config(**overrides: Any) -> Config:
    """Desk-scale configuration used by the synthetic experiments and tests."""
    base = {
        "model.audio.arch": "small_mlp",
        "model.audio.out_dim": 32,
        "model.audio.hidden_dim": 64,
        "model.audio.input_shape": [64],
        "model.visual.arch": "small_mlp",
        "model.visual.out_dim": 32,
        "model.visual.hidden_dim": 64,
        "model.visual.input_shape": [16],
        "model.fusion.embed_dim": 32,
        "model.fusion.model_dim": 64,
        "model.fusion.n_blocks": 2,
        "model.fusion.n_heads": 4,
        "model.fusion.ff_dim": 128,
        "model.fusion.dropout": 0.1,
        "model.fusion.max_len": 64,
        "train.epochs": 10,
        "train.batch_size": 16,
    }
    base.update(overrides)
    return apply_overrides(Config(), base)
