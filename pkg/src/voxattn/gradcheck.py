"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .blocks import BlockConfig, BlockParams, CAWeights, DAWeights, ca_forward, da_forward, dual_attention_block_forward
from .ops import BNState, ConvSpec
from .tensor import Tape, Tensor

DENOM_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    per_input: list = field(default_factory=list)
    n_checked: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               seed: int = 0, name: str = "") -> GradCheckReport:
    """Compare tape gradients of sum(fn(*inputs) * R) against central differences.

    ``inputs`` are promoted to float64 in place and perturbed in place, so
    closures that hold the same Tensor objects see the perturbation.  R is a
    fixed random projection that turns any output into a scalar.
    """
    for t in inputs:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None
    with Tape(np.float64, recording=False):
        probe = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def output() -> np.ndarray:
        with Tape(np.float64, recording=False):
            return np.array(fn(*inputs).data, copy=True)

    with Tape(np.float64) as tape:
        out = fn(*inputs)
        loss = ops.sum(ops.mul(out, Tensor(proj, dtype=np.float64)))
    tape.backward(loss)

    per_input, total = [], 0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = output()
            flat[i] = orig - eps
            down = output()
            flat[i] = orig
            # differencing before projecting avoids cancellation between two large sums
            numeric.reshape(-1)[i] = float(((up - down) * proj).sum()) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
        per_input.append(float(np.max(np.abs(analytic - numeric) / denom)))
        total += flat.size
    return GradCheckReport(name, max(per_input) if per_input else 0.0, per_input, total)


# --------------------------------------------------------------------------
# the standard suite

def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)


def _away_from_zero(rng, *shape, margin=0.05) -> Tensor:
    x = rng.standard_normal(shape)
    return Tensor(np.where(x >= 0, x + margin, x - margin), dtype=np.float64)


def _block_case(rng, cfg: BlockConfig, x_shape, training=True):
    block = BlockParams.create(cfg, rng)
    tensors = list(block.named_tensors().values())
    for t in tensors:
        # spread gamma/beta away from their 1/0 init so their gradients are exercised
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    x = _t(rng, *x_shape)
    for st in block.named_bn_states().values():
        st.running_mean = rng.standard_normal(st.running_mean.shape).astype(np.float32) * 0.1
        st.running_var = rng.uniform(0.5, 1.5, st.running_var.shape).astype(np.float32)
    fn = lambda x_, *_: dual_attention_block_forward(x_, cfg, block, training)  # noqa: E731
    return fn, [x] + tensors


def suite_cases(seed: int):
    """(name, fn, inputs) for every differentiable op plus full blocks."""
    rng = np.random.default_rng(seed)
    cases = []
    a, b = _t(rng, 2, 3, 4), _t(rng, 1, 3, 1)
    cases.append(("add", lambda x, y: ops.add(x, y), [a, b]))
    cases.append(("mul", lambda x, y: ops.mul(x, y), [_t(rng, 2, 3, 4), _t(rng, 2, 1, 4)]))
    cases.append(("neg", ops.neg, [_t(rng, 3, 2)]))
    cases.append(("sum", ops.sum, [_t(rng, 3, 2)]))
    cases.append(("mean", ops.mean, [_t(rng, 3, 2)]))
    cases.append(("reshape", lambda x: ops.reshape(x, (6, 4)), [_t(rng, 2, 3, 4)]))
    cases.append(("linear", ops.linear, [_t(rng, 4, 8), _t(rng, 5, 8), _t(rng, 5)]))
    cases.append(("relu", ops.relu, [_away_from_zero(rng, 3, 4, 5)]))
    cases.append(("sigmoid", ops.sigmoid, [_t(rng, 3, 4, 5, scale=2.0)]))
    spec = ConvSpec(3, 2, 3, 1, 1, bias=True)
    cases.append(("conv3d", lambda x, w, bb: ops.conv3d(x, spec, w, bb),
                  [_t(rng, 2, 3, 4, 5, 5), _t(rng, *spec.weight_shape, scale=0.3), _t(rng, 2)]))
    spec_s = ConvSpec(2, 3, 3, (1, 2, 2), 1)
    cases.append(("conv3d_strided", lambda x, w: ops.conv3d(x, spec_s, w),
                  [_t(rng, 1, 2, 3, 5, 6), _t(rng, *spec_s.weight_shape, scale=0.3)]))
    cases.append(("maxpool3d", lambda x: ops.maxpool3d(x, 3, 2, 1), [_t(rng, 2, 2, 4, 5, 5)]))
    cases.append(("gap_spatial", ops.gap_spatial, [_t(rng, 2, 3, 4, 3, 2)]))
    cases.append(("gap_global", ops.gap_global, [_t(rng, 2, 3, 4, 3, 2)]))
    bn_state = BNState.fresh(3)
    cases.append(("batchnorm3d_train", lambda x, g, bb: ops.batchnorm3d(x, g, bb, bn_state, True),
                  [_t(rng, 2, 3, 3, 3, 2), _t(rng, 3), _t(rng, 3)]))
    bn_eval = BNState(rng.standard_normal(3).astype(np.float32), rng.uniform(0.5, 2, 3).astype(np.float32))
    cases.append(("batchnorm3d_eval", lambda x, g, bb: ops.batchnorm3d(x, g, bb, bn_eval, False),
                  [_t(rng, 2, 3, 3, 3, 2), _t(rng, 3), _t(rng, 3)]))
    labels = rng.integers(0, 3, size=4)
    cases.append(("softmax_cross_entropy", lambda z: ops.softmax_cross_entropy(z, labels), [_t(rng, 4, 3)]))
    ca = CAWeights.create(4, 2, rng)
    cases.append(("ca_forward", lambda x, *_: ca_forward(x, ca), [_t(rng, 2, 4, 2, 3, 3), ca.w1, ca.w2]))
    da = DAWeights.create(2 * 3, 2, rng)
    cases.append(("da_forward", lambda x, *_: da_forward(x, da, 3), [_t(rng, 2, 2, 3, 3, 2), da.w1, da.w2]))
    fn, ins = _block_case(rng, BlockConfig(4, 4, 1, feature_depth=3, r_ca=2, r_da=4), (2, 4, 3, 3, 3))
    cases.append(("dual_attention_block", fn, ins))
    fn, ins = _block_case(rng, BlockConfig(2, 4, (1, 2, 2), feature_depth=3, r_ca=2, r_da=4), (2, 2, 3, 4, 4))
    cases.append(("dual_attention_block_projection", fn, ins))
    fn, ins = _block_case(rng, BlockConfig(4, 4, 1, feature_depth=2, r_ca=2, r_da=4), (2, 4, 2, 3, 3),
                          training=False)
    cases.append(("dual_attention_block_eval", fn, ins))
    return cases


def gradient_suite(seeds: Sequence[int] = range(5), eps: float = 1e-5) -> list[GradCheckReport]:
    reports = []
    for seed in seeds:
        for name, fn, inputs in suite_cases(seed):
            rep = grad_check(fn, inputs, eps=eps, seed=seed, name=f"{name}[seed={seed}]")
            reports.append(rep)
    return reports
