"""Dataclass configs and the flat ``section.key = value`` config file format.

Recognised keys::

    encoder.variant      S12 | S24 | S36 | custom
    encoder.dims         [int x4]
    encoder.depths       [int x4] (named variants fix the depths; set variant = "custom" to change them)
    encoder.heads        [int x4]
    encoder.mlp_ratio    float
    decoder.channels     int (pyramid width, default 128)
    decoder.topdown      bool
    model.num_classes    int
    feedback.mode        none | lite | attn_self | attn_st
    feedback.beta_init   float
    feedback.attn_downsample  int
    feedback.hidden      int (Lite module width, default 64)
    feedback.both_rounds bool (False = loss on the second round only)
    loss.lambda1 / loss.lambda2 / loss.lambda3 / loss.alpha
    train.epochs / train.batch_size / train.lr / train.eval_every / train.augment
    data.root / data.tile / data.fold
    data.protocol        drosophila-5fold | ratio-3fold | none (train = val = test = all images)
    seed                 int

Files are TOML; nested tables are flattened to dotted keys, so
``[encoder]\nvariant = "S12"`` and ``encoder.variant = "S12"`` are equivalent.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import tomli

from .errors import ConfigError

VARIANT_DEPTHS = {
    "S12": [2, 2, 6, 2],
    "S24": [4, 4, 12, 4],
    "S36": [6, 6, 18, 6],
}
DEFAULT_DIMS = [64, 128, 320, 512]
DEFAULT_HEADS = [1, 2, 5, 8]
FEEDBACK_MODES = ("none", "lite", "attn_self", "attn_st")


@dataclass
class EncoderConfig:
    variant: str = "S12"
    dims: List[int] = field(default_factory=lambda: list(DEFAULT_DIMS))
    depths: List[int] = field(default_factory=lambda: list(VARIANT_DEPTHS["S12"]))
    heads: List[int] = field(default_factory=lambda: list(DEFAULT_HEADS))
    mlp_ratio: float = 4.0
    patch_kernel: List[int] = field(default_factory=lambda: [7, 3, 3, 3])
    patch_stride: List[int] = field(default_factory=lambda: [4, 2, 2, 2])
    patch_padding: List[int] = field(default_factory=lambda: [2, 1, 1, 1])

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "EncoderConfig":
        if variant not in VARIANT_DEPTHS:
            raise ConfigError(f"unknown encoder variant {variant!r}; valid: {', '.join(VARIANT_DEPTHS)}")
        return cls(variant=variant, depths=list(VARIANT_DEPTHS[variant]), **overrides)

    def validate(self) -> None:
        if self.variant != "custom" and self.variant not in VARIANT_DEPTHS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}; valid: {', '.join(VARIANT_DEPTHS)}, custom")
        if self.variant in VARIANT_DEPTHS and list(self.depths) != VARIANT_DEPTHS[self.variant]:
            raise ConfigError(f"encoder variant {self.variant} has depths {VARIANT_DEPTHS[self.variant]}, got "
                              f"{list(self.depths)}; use EncoderConfig.from_variant or variant = \"custom\"")
        for name in ("dims", "depths", "heads", "patch_kernel", "patch_stride", "patch_padding"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"encoder.{name} needs 4 entries, got {getattr(self, name)}")
        for dim, heads in zip(self.dims, self.heads):
            if heads < 1 or dim % heads:
                raise ConfigError(f"encoder dim {dim} not divisible by {heads} heads")
        if any(d < 1 for d in self.depths) or any(d < 1 for d in self.dims):
            raise ConfigError("encoder dims and depths must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("encoder.mlp_ratio must be positive")

    @property
    def reduction(self) -> int:
        total = 1
        for s in self.patch_stride:
            total *= s
        return total


@dataclass
class DecoderConfig:
    channels: int = 128
    num_classes: int = 5
    topdown: bool = True

    def validate(self) -> None:
        if self.channels < 1:
            raise ConfigError("decoder.channels must be positive")
        if self.num_classes < 2:
            raise ConfigError("model.num_classes must be at least 2")


@dataclass
class FeedbackConfig:
    mode: str = "lite"
    beta_init: float = 1.0
    attn_downsample: int = 4
    hidden: int = 64
    both_rounds: bool = True

    def validate(self) -> None:
        if self.mode not in FEEDBACK_MODES:
            raise ConfigError(f"feedback.mode {self.mode!r} not in {FEEDBACK_MODES}")
        if self.attn_downsample < 1:
            raise ConfigError("feedback.attn_downsample must be >= 1")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)

    @property
    def num_classes(self) -> int:
        return self.decoder.num_classes

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate()
        self.feedback.validate()


@dataclass
class LossConfig:
    lambda1: float = 0.7
    lambda2: float = 0.3
    lambda3: float = 0.4
    alpha: float = 0.5

    def validate(self) -> None:
        for name, value in dataclasses.asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss.{name} must be non-negative, got {value}")


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    eval_every: int = 5
    augment: bool = True
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.eval_every < 1:
            raise ConfigError(f"invalid training config: {self}")
        self.loss.validate()


@dataclass
class DataConfig:
    root: Optional[str] = None
    tile: int = 256
    protocol: str = "ratio-3fold"
    fold: int = 0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _flatten(table: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


# flat key -> (attribute path inside ExperimentConfig)
_KEYS = {
    "encoder.variant": "model.encoder.variant",
    "encoder.dims": "model.encoder.dims",
    "encoder.depths": "model.encoder.depths",
    "encoder.heads": "model.encoder.heads",
    "encoder.mlp_ratio": "model.encoder.mlp_ratio",
    "decoder.channels": "model.decoder.channels",
    "decoder.topdown": "model.decoder.topdown",
    "model.num_classes": "model.decoder.num_classes",
    "feedback.mode": "model.feedback.mode",
    "feedback.beta_init": "model.feedback.beta_init",
    "feedback.attn_downsample": "model.feedback.attn_downsample",
    "feedback.hidden": "model.feedback.hidden",
    "feedback.both_rounds": "model.feedback.both_rounds",
    "loss.lambda1": "train.loss.lambda1",
    "loss.lambda2": "train.loss.lambda2",
    "loss.lambda3": "train.loss.lambda3",
    "loss.alpha": "train.loss.alpha",
    "train.epochs": "train.epochs",
    "train.batch_size": "train.batch_size",
    "train.lr": "train.lr",
    "train.eval_every": "train.eval_every",
    "train.augment": "train.augment",
    "data.root": "data.root",
    "data.tile": "data.tile",
    "data.protocol": "data.protocol",
    "data.fold": "data.fold",
    "seed": "seed",
}


def config_from_mapping(values: Dict[str, Any]) -> ExperimentConfig:
    flat = _flatten(values)
    unknown = sorted(set(flat) - set(_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = ExperimentConfig()
    variant = flat.get("encoder.variant")
    if variant is not None and variant != "custom":
        cfg.model.encoder = EncoderConfig.from_variant(variant)
    for key, value in flat.items():
        *path, attr = _KEYS[key].split(".")
        target = cfg
        for part in path:
            target = getattr(target, part)
        current = getattr(target, attr)
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{key} must be true/false, got {value!r}")
        if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        setattr(target, attr, value)
    cfg.train.seed = cfg.seed
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            values = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_mapping(values)
