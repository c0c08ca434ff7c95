"""Multi-resolution feature extractors.

Three variants share one interface:

* ``serial``    - stem then four stages, each after the first halving the
  resolution; intermediate stage outputs form the pyramid.
* ``hrnet``     - parallel streams at strides 1, 2, 4, 8 added one per stage
  and kept to the end, with all-pairs exchange units after every stage.
* ``pro_hrnet`` - ``hrnet`` with dilated 3x3x3 convolutions on chosen
  streams/stages. Dilation adds no parameters.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .functional import ShapeError
from .nn import BatchNorm3d, Conv3d, ConvBlock, Module
from .tensor import Tensor

VARIANTS = ("serial", "hrnet", "pro_hrnet")


class ConfigError(ValueError):
    pass


@dataclass
class StreamSpec:
    resolution_level: int
    width: int
    block_count: int = 2
    dilation: int = 1


@dataclass
class StageSpec:
    streams: List[StreamSpec]


@dataclass
class BackboneConfig:
    variant: str = "hrnet"
    base_width: int = 8
    stages: List[StageSpec] = field(default_factory=list)
    fusion: bool = True
    batchnorm: bool = True
    in_channels: int = 1
    pro_dilation: int = 2
    pro_stages: Tuple[int, ...] = (3, 4)
    pro_streams: Tuple[int, ...] = (0,)

    @property
    def num_levels(self) -> int:
        return max(s.resolution_level for st in self.stages for s in st.streams) + 1

    @property
    def widths(self) -> List[int]:
        widths: Dict[int, int] = {}
        for st in self.stages:
            for s in st.streams:
                widths.setdefault(s.resolution_level, s.width)
        return [widths[r] for r in sorted(widths)]

    def validate(self) -> "BackboneConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown backbone variant {self.variant!r}")
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        widths: Dict[int, int] = {}
        for i, st in enumerate(self.stages, start=1):
            levels = [s.resolution_level for s in st.streams]
            if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
                raise ConfigError(f"stage {i}: resolution levels must strictly increase")
            for s in st.streams:
                if s.width < 1 or s.dilation < 1 or s.block_count < 0 or s.resolution_level < 0:
                    raise ConfigError(f"stage {i}: invalid stream {s}")
                if widths.setdefault(s.resolution_level, s.width) != s.width:
                    raise ConfigError(f"inconsistent width for stream {s.resolution_level}")
            if self.variant != "serial" and levels != list(range(i)):
                raise ConfigError(f"stage {i} of a multi-stream backbone must hold streams 0..{i - 1}")
            if self.variant == "serial" and levels != [i - 1]:
                raise ConfigError(f"serial stage {i} must hold exactly stream {i - 1}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pro_stages"] = list(self.pro_stages)
        d["pro_streams"] = list(self.pro_streams)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        stages = [StageSpec([StreamSpec(**s) for s in st["streams"]]) for st in d.pop("stages", [])]
        for key in ("pro_stages", "pro_streams"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(stages=stages, **d)
        return cfg.validate()


def default_config(variant: str = "hrnet", base_width: int = 8, blocks: int = 2,
                   levels: int = 4, **kw) -> BackboneConfig:
    """Four-stage config with widths doubling per resolution level."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown backbone variant {variant!r}")
    stages = []
    for s in range(1, levels + 1):
        if variant == "serial":
            streams = [StreamSpec(s - 1, base_width * 2 ** (s - 1), blocks)]
        else:
            streams = [StreamSpec(r, base_width * 2 ** r, blocks) for r in range(s)]
        stages.append(StageSpec(streams))
    base_variant = "hrnet" if variant == "pro_hrnet" else variant
    cfg = BackboneConfig(variant=base_variant, base_width=base_width, stages=stages, **kw)
    cfg.validate()
    return make_pro(cfg) if variant == "pro_hrnet" else cfg


def make_pro(config: BackboneConfig) -> BackboneConfig:
    """Return the dilated twin of an HRNet config (idempotent)."""
    if config.variant not in ("hrnet", "pro_hrnet"):
        raise ConfigError("make_pro applies to hrnet configs")
    cfg = copy.deepcopy(config)
    cfg.variant = "pro_hrnet"
    for s, st in enumerate(cfg.stages, start=1):
        if s in cfg.pro_stages:
            for spec in st.streams:
                if spec.resolution_level in cfg.pro_streams:
                    spec.dilation = cfg.pro_dilation
    return cfg.validate()


def stream_receptive_field(config: BackboneConfig, stage: int, stream: int) -> int:
    """Receptive field (voxels, at the stream's own resolution) of one stage's block stack."""
    spec = next(s for s in config.stages[stage - 1].streams if s.resolution_level == stream)
    layers = [(3, spec.dilation)] * spec.block_count
    return F.effective_receptive_field(layers)[0] if layers else 1


@dataclass
class FeaturePyramid:
    levels: List[Tensor]
    strides: List[int]

    def __len__(self):
        return len(self.levels)


class Stream(Module):
    """Residual stack of conv blocks at one resolution."""

    def __init__(self, spec: StreamSpec, rng, batchnorm: bool):
        super().__init__()
        self.count = spec.block_count
        for b in range(spec.block_count):
            self.add_module(f"block{b}", ConvBlock(spec.width, spec.width, rng,
                                                   dilation=spec.dilation, batchnorm=batchnorm))

    def forward(self, x):
        y = x
        for b in range(self.count):
            y = getattr(self, f"block{b}")(y)
        return y + x if self.count else x


class Exchange(Module):
    """All-pairs fusion between streams; one 1x1x1 conv per (target, source) pair."""

    def __init__(self, widths: Sequence[int], rng, batchnorm: bool = False):
        super().__init__()
        self.n = len(widths)
        self.batchnorm = batchnorm
        for r in range(self.n):
            for q in range(self.n):
                path = Module()
                for i in range(max(r - q, 0)):
                    path.add_module(f"down{i}", Conv3d(widths[q], widths[q], rng, stride=2))
                path.add_module("proj", Conv3d(widths[q], widths[r], rng, kernel=1))
                self.add_module(f"to{r}_from{q}", path)
            if batchnorm:
                self.add_module(f"norm{r}", BatchNorm3d(widths[r]))

    def forward(self, features):
        """Fused streams, batch-normalised (if enabled) and rectified."""
        fused = exchange_fuse(features, self)
        if self.batchnorm:
            fused = [getattr(self, f"norm{r}")(f) for r, f in enumerate(fused)]
        return [f.relu() for f in fused]


def exchange_fuse(features: Sequence[Tensor], unit: Exchange) -> List[Tensor]:
    """Fuse streams: ``out[r] = sum_q proj_{r,q}(resize_{q->r}(features[q]))``.

    Resizing is repeated stride-2 convolution for higher-resolution sources
    and nearest upsampling for lower-resolution ones. The 1x1x1 projection
    commutes with nearest upsampling, so it runs at the source resolution.
    """
    n = len(features)
    if n != unit.n:
        raise ShapeError(f"exchange unit built for {unit.n} streams, got {n}")
    batch = {f.shape[0] for f in features}
    if len(batch) != 1:
        raise ShapeError(f"streams disagree on batch size: {sorted(batch)}")
    outs = []
    for r in range(n):
        total = None
        for q in range(n):
            path = getattr(unit, f"to{r}_from{q}")
            y = features[q]
            for i in range(max(r - q, 0)):
                y = getattr(path, f"down{i}")(y)
            y = path.proj(y)
            if q > r:
                y = F.upsample_nearest(y, 2 ** (q - r))
            total = y if total is None else total + y
        outs.append(total)
    return outs


class HRBackbone(Module):
    def __init__(self, config: BackboneConfig, rng):
        super().__init__()
        self.config = config
        bn = config.batchnorm
        widths = config.widths
        self.stem = ConvBlock(config.in_channels, widths[0], rng, batchnorm=bn)
        self.n_stages = len(config.stages)
        for s, st in enumerate(config.stages, start=1):
            stage = Module()
            for spec in st.streams:
                stage.add_module(f"stream{spec.resolution_level}", Stream(spec, rng, bn))
            self.add_module(f"stage{s}", stage)
            if config.fusion:
                self.add_module(f"fuse{s}", Exchange([sp.width for sp in st.streams], rng, bn))
            if s < self.n_stages:
                self.add_module(f"trans{s}", ConvBlock(widths[s - 1], widths[s], rng,
                                                       stride=2, batchnorm=bn))

    def forward(self, x) -> FeaturePyramid:
        feats = [self.stem(x)]
        for s in range(1, self.n_stages + 1):
            stage = getattr(self, f"stage{s}")
            feats = [getattr(stage, f"stream{r}")(f) for r, f in enumerate(feats)]
            if self.config.fusion:
                feats = getattr(self, f"fuse{s}")(feats)
            if s < self.n_stages:
                feats.append(getattr(self, f"trans{s}")(feats[-1]))
        return FeaturePyramid(feats, [2 ** r for r in range(len(feats))])


class SerialBackbone(Module):
    def __init__(self, config: BackboneConfig, rng):
        super().__init__()
        self.config = config
        bn = config.batchnorm
        widths = config.widths
        self.stem = ConvBlock(config.in_channels, widths[0], rng, batchnorm=bn)
        self.n_stages = len(config.stages)
        for s, st in enumerate(config.stages, start=1):
            spec = st.streams[0]
            stage = Module()
            if s > 1:
                stage.add_module("down", ConvBlock(widths[s - 2], widths[s - 1], rng,
                                                   stride=2, batchnorm=bn))
            stage.add_module(f"stream{spec.resolution_level}", Stream(spec, rng, bn))
            self.add_module(f"stage{s}", stage)

    def forward(self, x) -> FeaturePyramid:
        y = self.stem(x)
        levels = []
        for s in range(1, self.n_stages + 1):
            stage = getattr(self, f"stage{s}")
            if s > 1:
                y = stage.down(y)
            y = getattr(stage, f"stream{s - 1}")(y)
            levels.append(y)
        return FeaturePyramid(levels, [2 ** r for r in range(len(levels))])


def build_backbone(config: BackboneConfig, seed: int = 0) -> Module:
    """Instantiate a backbone with deterministic initialisation from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    net = SerialBackbone(config, rng) if config.variant == "serial" else HRBackbone(config, rng)
    return net


def forward(network: Module, patch) -> FeaturePyramid:
    """Run ``network`` on a ``(N, 1, D, H, W)`` patch."""
    patch = patch if isinstance(patch, Tensor) else Tensor(patch)
    div = 2 ** (network.config.num_levels - 1)
    if patch.ndim != 5 or any(d % div for d in patch.shape[2:]):
        raise ShapeError(f"patch extents {patch.shape[2:]} must be divisible by {div}")
    return network(patch)
