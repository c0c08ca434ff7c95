"""Experiment configuration: one TOML file with a table per subsystem.

Example::

    [data]
    patch = 32
    crop = 24

    [backbone]
    variant = "pro_hrnet"
    base_width = 8

    [detection]
    score_thresh = 0.05

    [train]
    lr = 0.01
    epochs = 30
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

import tomli
import tomli_w

from ..backbone import BackboneConfig, ConfigError, default_config
from ..detection.cascade import DetectConfig


class ConfigFileError(ConfigError):
    """The configuration file is missing or unparsable."""


@dataclass
class DataConfig:
    patch: int = 32
    crop: int = 24
    window: Tuple[float, float] = (-1000.0, 400.0)
    positive_fraction: float = 0.75
    crop_jitter: float = 4.0
    min_diameter_mm: float = 3.0

    def validate(self) -> "DataConfig":
        if self.patch < 1 or self.crop < 1:
            raise ConfigError("patch and crop edges must be positive")
        if not self.window[0] < self.window[1]:
            raise ConfigError(f"window must satisfy lo < hi, got {self.window}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ConfigError("positive_fraction must lie in [0, 1]")
        return self


@dataclass
class BackboneSection:
    variant: str = "pro_hrnet"
    base_width: int = 8
    blocks: int = 2
    levels: int = 4
    batchnorm: bool = True
    fusion: bool = True
    pro_dilation: int = 2
    pro_stages: Tuple[int, ...] = (3, 4)
    pro_streams: Tuple[int, ...] = (0,)

    def build(self) -> BackboneConfig:
        return default_config(self.variant, base_width=self.base_width, blocks=self.blocks,
                              levels=self.levels, batchnorm=self.batchnorm, fusion=self.fusion,
                              pro_dilation=self.pro_dilation, pro_stages=tuple(self.pro_stages),
                              pro_streams=tuple(self.pro_streams))


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_epochs: Tuple[int, ...] = (20,)
    decay_factor: float = 0.1
    grad_clip: Optional[float] = 10.0
    batch_size: int = 4
    epochs: int = 30
    dropout: float = 0.5
    lam: float = 0.5
    seed: int = 0
    augment: bool = True
    arbitrary_angle: bool = False
    val_every: int = 1
    val_loss: bool = True
    keep_checkpoints: int = 0
    log_seconds: bool = True
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        return self

    def lr_at(self, epoch: int) -> float:
        """Step schedule; ``epoch`` is 1-based."""
        return self.lr * self.decay_factor ** sum(epoch > e for e in self.decay_epochs)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    detection: DetectConfig = field(default_factory=DetectConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        self.data.validate()
        self.train.validate()
        self.backbone.build()
        self.detection.loss.validate()
        div = 2 ** (self.backbone.levels - 1)
        for edge, name in ((self.data.patch, "patch"), (self.data.crop, "crop")):
            if edge % div:
                raise ConfigError(f"data.{name}={edge} must be divisible by {div}")
        return self

    def detect_config(self) -> DetectConfig:
        d = self.detection.to_dict()
        d["dropout"] = self.train.dropout
        d["loss"]["lam"] = self.train.lam
        return DetectConfig.from_dict(d)

    def to_dict(self) -> dict:
        out = {"data": _plain(asdict(self.data)), "backbone": _plain(asdict(self.backbone)),
               "detection": _plain(self.detection.to_dict()), "train": _plain(asdict(self.train))}
        if out["train"]["grad_clip"] is None:
            del out["train"]["grad_clip"]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"data", "backbone", "detection", "train"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config sections: {sorted(extra)}")
        try:
            cfg = cls(data=_section(DataConfig, d.get("data", {})),
                      backbone=_section(BackboneSection, d.get("backbone", {})),
                      detection=DetectConfig.from_dict(d.get("detection", {})),
                      train=_section(TrainConfig, d.get("train", {})))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def recipe_hash(self) -> str:
        """Hash of everything that shapes the training trajectory; the epoch horizon may change on resume."""
        d = self.to_dict()
        for key in ("epochs", "keep_checkpoints"):
            d["train"].pop(key, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _section(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys for [{cls.__name__}]: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigFileError(f"config file not found: {path}") from exc
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigFileError(f"cannot parse config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(cfg.to_dict(), fh)
