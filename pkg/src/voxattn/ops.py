"""Differentiable kernels over :class:`~voxattn.tensor.Tensor`.

Every function computes its forward result with numpy and, when a tape is
active and some input requires a gradient, records a vector-Jacobian product
closure on that tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError, ShapeError, StateError
from .tensor import Tensor, active_tape, check_finite, precision

__all__ = [
    "ConvSpec", "BNState", "conv3d", "linear", "batchnorm3d", "relu", "sigmoid",
    "maxpool3d", "gap_spatial", "gap_global", "softmax_cross_entropy",
    "add", "mul", "neg", "sum", "mean", "reshape",
]


def _triple(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ConfigError(f"expected 3 values (depth, height, width), got {v!r}")
    return t


def _data(t: Tensor, dtype) -> np.ndarray:
    return t.data.astype(dtype, copy=False)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    check_finite(out, op)
    result = Tensor(out, dtype=out.dtype)
    tape = active_tape()
    if tape is not None and tape.recording and any(t is not None and t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(op, [t for t in inputs if t is not None], result, vjp)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _out_extent(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


# --------------------------------------------------------------------------
# elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    dt = precision(a, b)
    out = _data(a, dt) + _data(b, dt)
    return _emit("add", out, [a, b], lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    dt = precision(a, b)
    ad, bd = _data(a, dt), _data(b, dt)

    def vjp(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", ad * bd, [a, b], vjp)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -_data(a, precision(a)), [a], lambda g: (-g,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    dt = precision(a)
    out = np.asarray(_data(a, dt).sum(), dtype=dt)
    return _emit("sum", out, [a], lambda g: (np.broadcast_to(g, a.shape).astype(dt),))


def mean(a: Tensor) -> Tensor:
    dt = precision(a)
    n = a.size
    out = np.asarray(_data(a, dt).mean(), dtype=dt)
    return _emit("mean", out, [a], lambda g: (np.broadcast_to(g / n, a.shape).astype(dt),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    dt = precision(a)
    out = _data(a, dt).reshape(tuple(shape))
    return _emit("reshape", out, [a], lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    xd = _data(x, precision(x))
    mask = xd > 0
    return _emit("relu", np.where(mask, xd, 0).astype(xd.dtype), [x], lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = _data(x, precision(x))
    from scipy.special import expit  # deferred: scipy.special import is slow
    s = expit(xd)
    return _emit("sigmoid", s, [x], lambda g: (g * s * (1 - s),))


# --------------------------------------------------------------------------
# convolution

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (1, 1, 1)
    bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"channel counts must be >= 1: {self.in_channels}->{self.out_channels}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigError(f"kernel extents must be odd and positive, got {self.kernel}")
        if any(s < 1 for s in self.stride):
            raise ConfigError(f"strides must be >= 1, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ConfigError(f"padding must be >= 0, got {self.padding}")

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def fan_in(self) -> int:
        return self.in_channels * int(np.prod(self.kernel))

    def output_extent(self, dhw: Sequence[int]) -> tuple:
        out = tuple(_out_extent(n, k, s, p) for n, k, s, p in zip(dhw, self.kernel, self.stride, self.padding))
        if any(n + 2 * p < k for n, k, p in zip(dhw, self.kernel, self.padding)) or any(o < 1 for o in out):
            raise ConfigError(
                f"convolution {self.kernel}/stride {self.stride}/pad {self.padding} "
                f"on extent {tuple(dhw)} gives non-positive output {out}"
            )
        return out


def _windows(xp: np.ndarray, kernel, stride, out_dhw) -> np.ndarray:
    """View of shape (N, C, Do, Ho, Wo, kD, kH, kW)."""
    w = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    sd, sh, sw = stride
    do, ho, wo = out_dhw
    return w[:, :, : sd * (do - 1) + 1 : sd, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]


def _scatter_windows(cols: np.ndarray, padded_shape, kernel, stride, out_dhw) -> np.ndarray:
    """Adjoint of :func:`_windows`: add (N, C, kD, kH, kW, Do, Ho, Wo) back into a padded volume."""
    dxp = np.zeros(padded_shape, dtype=cols.dtype)
    sd, sh, sw = stride
    do, ho, wo = out_dhw
    for kd in range(kernel[0]):
        for kh in range(kernel[1]):
            for kw in range(kernel[2]):
                dxp[:, :, kd : kd + sd * (do - 1) + 1 : sd,
                    kh : kh + sh * (ho - 1) + 1 : sh,
                    kw : kw + sw * (wo - 1) + 1 : sw] += cols[:, :, kd, kh, kw]
    return dxp


def _crop(a: np.ndarray, padding) -> np.ndarray:
    pd, ph, pw = padding
    d, h, w = a.shape[2:]
    return a[:, :, pd : d - pd, ph : h - ph, pw : w - pw]


def conv3d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3D cross-correlation with zero padding, computed as a batched im2col matmul."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects a 5-d (N,C,D,H,W) input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv3d input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv3d weight shape {weight.shape} != expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv3d bias shape {bias.shape} != ({spec.out_channels},)")
    out_dhw = spec.output_extent(x.shape[2:])
    dt = precision(x, weight, bias)
    n, c = x.shape[:2]
    ck = spec.fan_in
    p = int(np.prod(out_dhw))
    pad = [(0, 0), (0, 0)] + [(q, q) for q in spec.padding]
    xp = np.pad(_data(x, dt), pad)
    win = _windows(xp, spec.kernel, spec.stride, out_dhw)
    # (N, C, kD, kH, kW, Do, Ho, Wo) -> (N, CK, P)
    cols = np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4)).reshape(n, ck, p)
    wmat = _data(weight, dt).reshape(spec.out_channels, ck)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += _data(bias, dt)[None, :, None]
    out = out.reshape((n, spec.out_channels) + out_dhw)

    def vjp(g):
        g2 = g.reshape(n, spec.out_channels, p)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = g2[0] @ cols[0].T
            for i in range(1, n):
                gw += g2[i] @ cols[i].T
            gw = gw.reshape(spec.weight_shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape((n, c) + spec.kernel + out_dhw)
            gx = _crop(_scatter_windows(dcols, xp.shape, spec.kernel, spec.stride, out_dhw), spec.padding)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return grads

    return _emit("conv3d", out, [x, weight, bias], vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """out[n, k] = sum_m weight[k, m] * x[n, m] + bias[k]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear inner extents differ: input {x.shape[1]} vs weight {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    dt = precision(x, weight, bias)
    xd, wd = _data(x, dt), _data(weight, dt)
    out = xd @ wd.T
    if bias is not None:
        out = out + _data(bias, dt)

    def vjp(g):
        grads = [g @ wd if x.requires_grad else None, g.T @ xd if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _emit("linear", out, [x, weight, bias], vjp)


# --------------------------------------------------------------------------
# normalization

@dataclass
class BNState:
    """Running statistics for one batch-norm layer; ``None`` until populated."""

    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "BNState":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))

    @property
    def populated(self) -> bool:
        return self.running_mean is not None and self.running_var is not None


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, training: bool) -> Tensor:
    """Per-channel normalization over (N, D, H, W) followed by a gamma/beta affine map.

    Training mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate.
    """
    if x.ndim != 5:
        raise ShapeError(f"batchnorm3d expects (N,C,D,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm3d gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    dt = precision(x, gamma, beta)
    xd = _data(x, dt)
    gd = _data(gamma, dt).reshape(1, c, 1, 1, 1)
    bd = _data(beta, dt).reshape(1, c, 1, 1, 1)
    axes = (0, 2, 3, 4)
    if training:
        count = x.size // c
        mu = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
        m = state.momentum
        unbiased = var.reshape(c) * (count / (count - 1) if count > 1 else 1.0)
        if state.populated:
            state.running_mean = ((1 - m) * state.running_mean + m * mu.reshape(c)).astype(np.float32)
            state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(np.float32)
        else:
            state.running_mean = mu.reshape(c).astype(np.float32)
            state.running_var = unbiased.astype(np.float32)
    else:
        if not state.populated:
            raise StateError("batchnorm3d in eval mode needs populated running statistics")
        count = None
        mu = state.running_mean.astype(dt).reshape(1, c, 1, 1, 1)
        var = state.running_var.astype(dt).reshape(1, c, 1, 1, 1)
    inv_std = 1.0 / np.sqrt(var + dt(state.eps))
    xhat = (xd - mu) * inv_std
    out = gd * xhat + bd

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                gx = inv_std / count * (
                    count * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv_std
        return gx, ggamma, gbeta

    return _emit("batchnorm3d", out.astype(dt, copy=False), [x, gamma, beta], vjp)


# --------------------------------------------------------------------------
# pooling

def maxpool3d(x: Tensor, kernel=3, stride=2, padding=1) -> Tensor:
    """Window maximum with -inf padding; ties route the gradient to the first maximum."""
    kernel, stride, padding = _triple(kernel), _triple(stride), _triple(padding)
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects (N,C,D,H,W), got {x.shape}")
    if any(p > k // 2 for p, k in zip(padding, kernel)):
        raise ConfigError(f"maxpool3d padding {padding} exceeds half the kernel {kernel}")
    if any(s < 1 for s in stride):
        raise ConfigError(f"strides must be >= 1, got {stride}")
    out_dhw = tuple(_out_extent(n, k, s, p) for n, k, s, p in zip(x.shape[2:], kernel, stride, padding))
    if any(o < 1 for o in out_dhw) or any(n + 2 * p < k for n, k, p in zip(x.shape[2:], kernel, padding)):
        raise ConfigError(f"maxpool3d on extent {x.shape[2:]} gives non-positive output {out_dhw}")
    dt = precision(x)
    n, c = x.shape[:2]
    kk = int(np.prod(kernel))
    pad = [(0, 0), (0, 0)] + [(q, q) for q in padding]
    xp = np.pad(_data(x, dt), pad, constant_values=-np.inf)
    win = _windows(xp, kernel, stride, out_dhw).reshape((n, c) + out_dhw + (kk,))
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        sd, sh, sw = stride
        do, ho, wo = out_dhw
        idx = 0
        for kd in range(kernel[0]):
            for kh in range(kernel[1]):
                for kw in range(kernel[2]):
                    dxp[:, :, kd : kd + sd * (do - 1) + 1 : sd,
                        kh : kh + sh * (ho - 1) + 1 : sh,
                        kw : kw + sw * (wo - 1) + 1 : sw] += np.where(arg == idx, g, 0)
                    idx += 1
        return (_crop(dxp, padding),)

    return _emit("maxpool3d", np.ascontiguousarray(out), [x], vjp)


def gap_spatial(x: Tensor) -> Tensor:
    """Mean over each (H, W) plane: (N, C, D, H, W) -> (N, C, D, 1, 1)."""
    if x.ndim != 5:
        raise ShapeError(f"gap_spatial expects (N,C,D,H,W), got {x.shape}")
    dt = precision(x)
    hw = x.shape[3] * x.shape[4]
    out = _data(x, dt).mean(axis=(3, 4), keepdims=True)
    return _emit("gap_spatial", out, [x], lambda g: (np.broadcast_to(g / hw, x.shape).astype(dt),))


def gap_global(x: Tensor) -> Tensor:
    """Mean over (D, H, W): (N, C, D, H, W) -> (N, C)."""
    if x.ndim != 5:
        raise ShapeError(f"gap_global expects (N,C,D,H,W), got {x.shape}")
    dt = precision(x)
    dhw = x.shape[2] * x.shape[3] * x.shape[4]
    out = _data(x, dt).mean(axis=(2, 3, 4))

    def vjp(g):
        return (np.broadcast_to((g / dhw)[:, :, None, None, None], x.shape).astype(dt),)

    return _emit("gap_global", out, [x], vjp)


# --------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of -log softmax(logits)[label], max-shifted for stability."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must be integers in [0, {k}), got {labels.tolist()}")
    dt = precision(logits)
    z = _data(logits, dt)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - shifted[rows, labels]).mean(), dtype=dt)

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _emit("softmax_cross_entropy", loss, [logits], vjp)
