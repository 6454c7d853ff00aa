"""Channel-wise and depth-wise attention gates and the dual-attention residual block."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .ops import BNState, ConvSpec
from .tensor import Tensor


def hidden_width(n: int, r: int) -> int:
    if r < 1:
        raise ConfigError(f"reduction ratio must be a positive integer, got {r}")
    return max(n // r, 1)


def kaiming_init(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He-normal draw: i.i.d. N(0, sqrt(2 / fan_in))."""
    if fan_in < 1:
        raise ConfigError(f"fan_in must be >= 1, got {fan_in}")
    draw = rng.standard_normal(shape)
    draw *= np.sqrt(2.0 / fan_in)
    return draw.astype(np.float32, copy=False)


def _param(arr, name=None) -> Tensor:
    return Tensor(arr, requires_grad=True, dtype=np.float32, name=name)


@dataclass
class GateWeights:
    """Bias-free bottleneck pair: hidden = relu(w1 @ z), gain = sigmoid(w2 @ hidden)."""

    w1: Tensor
    w2: Tensor
    r: int

    @property
    def width(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def create(cls, width: int, r: int, rng: Optional[np.random.Generator] = None) -> "GateWeights":
        hidden = hidden_width(width, r)
        if rng is None:
            w1 = np.zeros((hidden, width), np.float32)
            w2 = np.zeros((width, hidden), np.float32)
        else:
            w1 = kaiming_init((hidden, width), width, rng)
            w2 = kaiming_init((width, hidden), hidden, rng)
        return cls(_param(w1), _param(w2), r)

    def gains(self, z: Tensor) -> Tensor:
        return ops.sigmoid(ops.linear(ops.relu(ops.linear(z, self.w1)), self.w2))

    def tensors(self):
        return {"w1": self.w1, "w2": self.w2}


class CAWeights(GateWeights):
    """Gate over the C pooled channel descriptors."""


class DAWeights(GateWeights):
    """Gate over the C*D pooled (channel, depth-slice) descriptors."""


def ca_forward(f_in: Tensor, weights: CAWeights) -> Tensor:
    """Rescale each channel by a learned gain in (0, 1) computed from its global mean."""
    n, c = f_in.shape[:2]
    if c != weights.width:
        raise ConfigError(f"channel attention built for {weights.width} channels, input has {c}")
    s = weights.gains(ops.gap_global(f_in))
    return ops.mul(f_in, ops.reshape(s, (n, c, 1, 1, 1)))


def da_forward(f_in: Tensor, weights: DAWeights, depth: Optional[int] = None) -> Tensor:
    """Rescale every (channel, depth) slice by its own gain.

    The H*W plane means of all C*D slices are flattened per sample and passed
    through the gate, so a slice's gain depends on every slice of the sample.
    """
    if f_in.ndim != 5:
        raise ShapeError(f"depth attention expects (N,C,D,H,W), got {f_in.shape}")
    n, c, d = f_in.shape[:3]
    if depth is not None and d != depth:
        raise ConfigError(f"depth attention configured for depth {depth}, input has depth {d}")
    if c * d != weights.width:
        raise ConfigError(
            f"depth attention built for C*D = {weights.width}, input gives {c}*{d} = {c * d}"
        )
    z = ops.reshape(ops.gap_spatial(f_in), (n, c * d))
    gains = weights.gains(z)
    return ops.mul(f_in, ops.reshape(gains, (n, c, d, 1, 1)))


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    state: BNState

    @classmethod
    def create(cls, channels: int) -> "BatchNorm":
        return cls(
            _param(np.ones(channels, np.float32)),
            _param(np.zeros(channels, np.float32)),
            BNState.fresh(channels),
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batchnorm3d(x, self.gamma, self.beta, self.state, training)


@dataclass
class ConvBN:
    spec: ConvSpec
    weight: Tensor
    bn: BatchNorm

    @classmethod
    def create(cls, spec: ConvSpec, rng: np.random.Generator) -> "ConvBN":
        w = kaiming_init(spec.weight_shape, spec.fan_in, rng)
        return cls(spec, _param(w), BatchNorm.create(spec.out_channels))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.bn(ops.conv3d(x, self.spec, self.weight), training)

    def tensors(self):
        return {"weight": self.weight, "bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta}


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    stride: tuple = (1, 1, 1)
    use_ca: bool = True
    use_da: bool = True
    r_ca: int = 16
    r_da: int = 16
    feature_depth: Optional[int] = None
    attention_order: tuple = ("ca", "da")

    def __post_init__(self):
        object.__setattr__(self, "stride", ops._triple(self.stride))
        object.__setattr__(self, "attention_order", tuple(self.attention_order))
        if sorted(self.attention_order) != ["ca", "da"]:
            raise ConfigError(f"attention_order must be a permutation of ('ca', 'da'), got {self.attention_order}")
        if self.use_da and self.feature_depth is None:
            raise ConfigError("depth attention needs feature_depth (the block's output depth)")

    @property
    def needs_projection(self) -> bool:
        return self.in_channels != self.out_channels or self.stride != (1, 1, 1)


@dataclass
class BlockParams:
    conv1: ConvBN
    conv2: ConvBN
    ca: Optional[CAWeights] = None
    da: Optional[DAWeights] = None
    shortcut: Optional[ConvBN] = None

    @classmethod
    def create(cls, cfg: BlockConfig, rng: np.random.Generator, zero_gates: bool = False) -> "BlockParams":
        conv1 = ConvBN.create(ConvSpec(cfg.in_channels, cfg.out_channels, 3, cfg.stride, 1), rng)
        conv2 = ConvBN.create(ConvSpec(cfg.out_channels, cfg.out_channels, 3, 1, 1), rng)
        gate_rng = None if zero_gates else rng
        ca = CAWeights.create(cfg.out_channels, cfg.r_ca, gate_rng) if cfg.use_ca else None
        da = (DAWeights.create(cfg.out_channels * cfg.feature_depth, cfg.r_da, gate_rng)
              if cfg.use_da else None)
        shortcut = None
        if cfg.needs_projection:
            shortcut = ConvBN.create(ConvSpec(cfg.in_channels, cfg.out_channels, 1, cfg.stride, 0), rng)
        return cls(conv1, conv2, ca, da, shortcut)

    def named_tensors(self) -> dict:
        out = {}
        for part in ("conv1", "conv2", "shortcut"):
            module = getattr(self, part)
            if module is not None:
                out.update({f"{part}.{k}": v for k, v in module.tensors().items()})
        for part in ("ca", "da"):
            gate = getattr(self, part)
            if gate is not None:
                out.update({f"{part}.{k}": v for k, v in gate.tensors().items()})
        return out

    def named_bn_states(self) -> dict:
        out = {}
        for part in ("conv1", "conv2", "shortcut"):
            module = getattr(self, part)
            if module is not None:
                out[f"{part}.bn"] = module.bn.state
        return out


def dual_attention_block_forward(x: Tensor, cfg: BlockConfig, params: BlockParams, training: bool) -> Tensor:
    """conv-BN-relu, conv-BN, attention gates, add shortcut, relu."""
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"block expects {cfg.in_channels} input channels, got {x.shape[1]}")
    y = ops.relu(params.conv1(x, training))
    y = params.conv2(y, training)
    for kind in cfg.attention_order:
        if kind == "ca" and cfg.use_ca:
            y = ca_forward(y, params.ca)
        elif kind == "da" and cfg.use_da:
            y = da_forward(y, params.da, cfg.feature_depth)
    shortcut = params.shortcut(x, training) if params.shortcut is not None else x
    return ops.relu(ops.add(y, shortcut))
