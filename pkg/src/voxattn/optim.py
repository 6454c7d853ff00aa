"""Adam, cosine learning-rate annealing and the epoch loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import ops
from .backbone import ModelParams, network_forward
from .data import AugmentToggles
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tape, Tensor


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState, lr: float) -> None:
    """One in-place Adam update with bias correction; a missing gradient counts as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"got {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.name or ''} {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - lr * step).astype(p.dtype, copy=False)


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2; t beyond T clamps to lr_min."""
    if total < 1:
        raise ConfigError(f"schedule length must be >= 1, got {total}")
    if t >= total:
        return lr_min
    t = max(t, 0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / total))


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr_max: float = 1e-3
    lr_min: float = 0.0
    seed: int = 0
    augment: AugmentToggles = field(default_factory=AugmentToggles)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_min > self.lr_max or self.lr_min < 0:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")


@dataclass
class EpochSummary:
    epoch: int
    mean_loss: float
    accuracy: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def train_epoch(params: ModelParams, state: AdamState, batches: Iterable, lr: float, epoch: int = 0) -> EpochSummary:
    """One pass over ``batches`` of (volumes, labels) at a fixed learning rate."""
    tensors = params.parameters()
    total_loss, correct, seen = 0.0, 0, 0
    for index, (x, y) in enumerate(batches):
        params.zero_grad()
        with Tape() as tape:
            logits, _ = network_forward(params, Tensor(x), training=True)
            loss = ops.softmax_cross_entropy(logits, y)
        value = float(loss.data.reshape(()))
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {index}")
        tape.backward(loss)
        adam_step(tensors, [p.grad for p in tensors], state, lr)
        total_loss += value * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
        seen += len(y)
    return EpochSummary(epoch, total_loss / max(seen, 1), correct / max(seen, 1), lr)
