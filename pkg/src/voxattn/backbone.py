"""Modified 3D ResNet18 assembled from dual-attention blocks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .blocks import BlockConfig, BlockParams, ConvBN, dual_attention_block_forward, kaiming_init
from .errors import ConfigError, InputError
from .ops import ConvSpec
from .tensor import Tensor


def _tuple_of_triples(v) -> tuple:
    return tuple(ops._triple(s) for s in v)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description.

    The default stride plan keeps the stem at depth stride 1 and runs the last
    stage at stride 1, so a 64x224x224 scan ends as an 8x14x14 feature volume.
    """

    input_geometry: tuple = (64, 224, 224)
    in_channels: int = 1
    stem_width: int = 64
    stem_kernel: tuple = (7, 7, 7)
    stem_stride: tuple = (1, 2, 2)
    use_maxpool: bool = True
    maxpool_stride: tuple = (2, 2, 2)
    stage_widths: tuple = (64, 128, 256, 512)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    stage_strides: tuple = ((1, 1, 1), (2, 2, 2), (2, 2, 2), (1, 1, 1))
    num_classes: int = 3
    use_ca: bool = True
    use_da: bool = True
    r_ca: int = 16
    r_da: int = 16
    width_multiplier: float = 1.0
    attention_order: tuple = ("ca", "da")

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("input_geometry", tuple(int(v) for v in self.input_geometry))
        set_("stem_kernel", ops._triple(self.stem_kernel))
        set_("stem_stride", ops._triple(self.stem_stride))
        set_("maxpool_stride", ops._triple(self.maxpool_stride))
        set_("stage_widths", tuple(int(v) for v in self.stage_widths))
        set_("blocks_per_stage", tuple(int(v) for v in self.blocks_per_stage))
        set_("stage_strides", _tuple_of_triples(self.stage_strides))
        set_("attention_order", tuple(self.attention_order))
        if len(self.input_geometry) != 3 or min(self.input_geometry) < 1:
            raise ConfigError(f"input_geometry must be three positive extents, got {self.input_geometry}")
        if not (len(self.stage_widths) == len(self.blocks_per_stage) == len(self.stage_strides)):
            raise ConfigError("stage_widths, blocks_per_stage and stage_strides must have equal length")
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be positive, got {self.width_multiplier}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.blocks_per_stage) < 1:
            raise ConfigError("every stage needs at least one block")
        if self.r_ca < 1 or self.r_da < 1:
            raise ConfigError("reduction ratios must be positive integers")

    @classmethod
    def desk_scale(cls, **overrides) -> "NetworkConfig":
        """Input 16x64x64 at a quarter of the full width."""
        base = dict(input_geometry=(16, 64, 64), width_multiplier=0.25)
        base.update(overrides)
        return cls(**base)

    def scaled(self, width: int) -> int:
        return max(int(round(width * self.width_multiplier)), 1)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: _listify(v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network field(s): {sorted(unknown)}")
        return cls(**d)


def _listify(v):
    if isinstance(v, tuple):
        return [_listify(i) for i in v]
    return v


@dataclass(frozen=True)
class StageShape:
    name: str
    channels: int
    dhw: tuple


def stage_shapes(cfg: NetworkConfig) -> list[StageShape]:
    """Static shape inference: output (C, D, H, W) of stem, pool and each stage."""
    shapes = []

    def step(name, spec_like, dhw, channels):
        try:
            out = spec_like.output_extent(dhw)
        except ConfigError as exc:
            raise ConfigError(f"{name}: {exc}") from None
        shapes.append(StageShape(name, channels, out))
        return out

    stem = ConvSpec(cfg.in_channels, cfg.scaled(cfg.stem_width), cfg.stem_kernel, cfg.stem_stride,
                    tuple(k // 2 for k in cfg.stem_kernel))
    dhw = step("stem", stem, cfg.input_geometry, stem.out_channels)
    if cfg.use_maxpool:
        pool = ConvSpec(1, 1, 3, cfg.maxpool_stride, 1)
        dhw = step("maxpool", pool, dhw, stem.out_channels)
    for i, (width, stride) in enumerate(zip(cfg.stage_widths, cfg.stage_strides)):
        dhw = step(f"layer{i + 1}", ConvSpec(1, 1, 3, stride, 1), dhw, cfg.scaled(width))
    return shapes


@dataclass
class ModelParams:
    cfg: NetworkConfig
    stem: ConvBN
    stages: list  # list[list[tuple[BlockConfig, BlockParams]]]
    fc_weight: Tensor
    fc_bias: Tensor

    def named_tensors(self) -> dict:
        out = {f"stem.{k}": v for k, v in self.stem.tensors().items()}
        for i, stage in enumerate(self.stages):
            for j, (_, block) in enumerate(stage):
                out.update({f"layer{i + 1}.{j}.{k}": v for k, v in block.named_tensors().items()})
        out["fc.weight"] = self.fc_weight
        out["fc.bias"] = self.fc_bias
        return out

    def named_bn_states(self) -> dict:
        out = {"stem.bn": self.stem.bn.state}
        for i, stage in enumerate(self.stages):
            for j, (_, block) in enumerate(stage):
                out.update({f"layer{i + 1}.{j}.{k}": v for k, v in block.named_bn_states().items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def block_configs(cfg: NetworkConfig) -> list[list[BlockConfig]]:
    shapes = {s.name: s for s in stage_shapes(cfg)}
    stages = []
    in_ch = cfg.scaled(cfg.stem_width)
    for i, (width, n_blocks, stride) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage, cfg.stage_strides)):
        out_ch = cfg.scaled(width)
        depth = shapes[f"layer{i + 1}"].dhw[0]
        stage = []
        for j in range(n_blocks):
            stage.append(BlockConfig(
                in_channels=in_ch if j == 0 else out_ch,
                out_channels=out_ch,
                stride=stride if j == 0 else (1, 1, 1),
                use_ca=cfg.use_ca, use_da=cfg.use_da, r_ca=cfg.r_ca, r_da=cfg.r_da,
                feature_depth=depth, attention_order=cfg.attention_order,
            ))
        stages.append(stage)
        in_ch = out_ch
    return stages


def build_network(cfg: NetworkConfig, seed: int = 0, zero_gates: bool = False,
                  initialize: bool = True) -> ModelParams:
    """Allocate and He-initialize every parameter; biases and BN beta start at 0, gamma at 1.

    ``zero_gates`` leaves every attention gate weight at 0 (all gains 1/2).
    ``initialize=False`` allocates zeros everywhere, for loading or counting.
    """
    rng = np.random.default_rng(seed) if initialize else _ZeroRNG()
    stem_spec = ConvSpec(cfg.in_channels, cfg.scaled(cfg.stem_width), cfg.stem_kernel, cfg.stem_stride,
                         tuple(k // 2 for k in cfg.stem_kernel))
    stem = ConvBN.create(stem_spec, rng)
    stages = [[(bc, BlockParams.create(bc, rng, zero_gates=zero_gates)) for bc in stage]
              for stage in block_configs(cfg)]
    feat = cfg.scaled(cfg.stage_widths[-1])
    fc_w = Tensor(kaiming_init((cfg.num_classes, feat), feat, rng), requires_grad=True)
    fc_b = Tensor(np.zeros(cfg.num_classes, np.float32), requires_grad=True)
    return ModelParams(cfg, stem, stages, fc_w, fc_b)


class _ZeroRNG:
    def standard_normal(self, shape):
        return np.zeros(shape, np.float32)


def network_forward(params: ModelParams, x: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
    """Return (logits, last-stage feature volume)."""
    cfg = params.cfg
    expected = (cfg.in_channels,) + cfg.input_geometry
    if x.ndim != 5 or x.shape[1:] != expected:
        raise InputError(f"network expects input (N, {', '.join(map(str, expected))}), got {x.shape}")
    y = ops.relu(params.stem(x, training))
    if cfg.use_maxpool:
        y = ops.maxpool3d(y, 3, cfg.maxpool_stride, 1)
    for stage in params.stages:
        for bc, block in stage:
            y = dual_attention_block_forward(y, bc, block, training)
    features = y
    logits = ops.linear(ops.gap_global(features), params.fc_weight, params.fc_bias)
    return logits, features


@dataclass
class ParamCount:
    total: int
    breakdown: dict = field(default_factory=dict)

    def __str__(self) -> str:
        lines = [f"{k:>10}: {v:>12,d}" for k, v in self.breakdown.items()]
        lines.append(f"{'total':>10}: {self.total:>12,d}  ({self.total / 1e6:.2f}M)")
        return "\n".join(lines)


def count_parameters(params: ModelParams, include_bn_stats: bool = False) -> ParamCount:
    """Trainable element counts split into stem / stages / attention / head."""
    breakdown = {"stem": 0, "stages": 0, "attention": 0, "head": 0}
    for name, t in params.named_tensors().items():
        if name.startswith("stem."):
            key = "stem"
        elif name.startswith("fc."):
            key = "head"
        elif ".ca." in name or ".da." in name:
            key = "attention"
        else:
            key = "stages"
        breakdown[key] += t.size
    if include_bn_stats:
        breakdown["bn_stats"] = sum(s.running_mean.size + s.running_var.size
                                    for s in params.named_bn_states().values())
    return ParamCount(sum(breakdown.values()), breakdown)
