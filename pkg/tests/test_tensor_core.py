import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxattn import ops
from voxattn.errors import ConfigError, InputError, NumericError, ShapeError, StateError, UsageError
from voxattn.gradcheck import grad_check
from voxattn.ops import BNState, ConvSpec
from voxattn.tensor import Tape, Tensor

import oracles


def T(a, grad=False, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=grad)


class TestTensor:
    def test_rejects_zero_extent(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0, 3)))

    def test_integer_input_becomes_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_checked_tape_flags_nonfinite(self):
        x = T([1.0, -1.0], grad=True)
        with pytest.raises(NumericError):
            with Tape(checked=True):
                ops.mul(x, T([np.inf, 1.0]))


class TestConv3d:
    def test_identity_kernel(self, rng):
        x = T(rng.standard_normal((2, 1, 3, 4, 5)))
        w = T(np.ones((1, 1, 1, 1, 1)))
        y = ops.conv3d(x, ConvSpec(1, 1, 1, 1, 0), w, T([0.0]))
        np.testing.assert_array_equal(y.data, x.data)

    def test_sum_of_27_ones(self):
        y = ops.conv3d(T(np.ones((1, 1, 3, 3, 3))), ConvSpec(1, 1, 3, 1, 0), T(np.ones((1, 1, 3, 3, 3))))
        assert y.shape == (1, 1, 1, 1, 1)
        assert y.data.item() == 27.0

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 4, 5, 5))
        w = rng.standard_normal((2, 3, 3, 3, 3))
        b = rng.standard_normal(2)
        y = ops.conv3d(T(x), ConvSpec(3, 2, 3, 1, 1, bias=True), T(w), T(b))
        np.testing.assert_allclose(y.data, oracles.conv3d_loops(x, w, b, (1, 1, 1), (1, 1, 1)), atol=1e-12)

    def test_strided_matches_loop_oracle(self, rng):
        x = rng.standard_normal((1, 2, 5, 7, 6))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        y = ops.conv3d(T(x), ConvSpec(2, 3, 3, (1, 2, 2), 1), T(w))
        np.testing.assert_allclose(y.data, oracles.conv3d_loops(x, w, None, (1, 2, 2), (1, 1, 1)), atol=1e-12)

    @pytest.mark.parametrize("size,k,s,p", [(16, 7, 2, 3), (8, 3, 2, 1), (4, 1, 2, 0), (5, 3, 1, 1)])
    def test_output_extent_formula(self, size, k, s, p):
        assert ConvSpec(1, 1, k, s, p).output_extent((size,) * 3) == ((size + 2 * p - k) // s + 1,) * 3

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            ops.conv3d(T(np.ones((1, 2, 3, 3, 3))), ConvSpec(3, 1), T(np.ones((1, 3, 3, 3, 3))))

    def test_weight_shape_mismatch(self):
        with pytest.raises(ShapeError, match="weight"):
            ops.conv3d(T(np.ones((1, 1, 3, 3, 3))), ConvSpec(1, 1), T(np.ones((1, 1, 1, 1, 1))))

    def test_non_positive_output_extent(self):
        with pytest.raises(ConfigError):
            ops.conv3d(T(np.ones((1, 1, 2, 2, 2))), ConvSpec(1, 1, 3, 1, 0), T(np.ones((1, 1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ConvSpec(1, 1, 2)


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        y = ops.linear(T(x), T(np.eye(4)), T(np.zeros(4)))
        np.testing.assert_array_equal(y.data, x)

    def test_hand_arithmetic(self):
        y = ops.linear(T([[1.0, 2.0]]), T([[1.0, 1.0], [1.0, -1.0]]), T([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [[3.0, -1.0]])

    def test_loop_oracle(self, rng):
        x, w, b = rng.standard_normal((4, 8)), rng.standard_normal((5, 8)), rng.standard_normal(5)
        np.testing.assert_allclose(ops.linear(T(x), T(w), T(b)).data, oracles.linear_loops(x, w, b), atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            ops.linear(T(np.ones((2, 3))), T(np.ones((4, 5))))


class TestBatchNorm:
    def test_train_mode_standardizes(self, rng):
        x = T(rng.standard_normal((3, 2, 4, 5, 5)) * 3 + 1)
        y = ops.batchnorm3d(x, T(np.ones(2)), T(np.zeros(2)), BNState(), True).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), 0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3, 4)), 1, atol=1e-4)

    def test_constant_channel_gives_beta(self):
        x = T(np.full((2, 1, 2, 3, 3), 7.0))
        y = ops.batchnorm3d(x, T([2.0]), T([0.25]), BNState(), True)
        np.testing.assert_allclose(y.data, 0.25)

    def test_two_pass_oracle(self, rng):
        x, g, b = rng.standard_normal((2, 3, 3, 4, 4)), rng.standard_normal(3), rng.standard_normal(3)
        y = ops.batchnorm3d(T(x), T(g), T(b), BNState(), True)
        np.testing.assert_allclose(y.data, oracles.batchnorm_two_pass(x, g, b, 1e-5), atol=1e-10)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((2, 2, 3, 3, 3))
        st = BNState.fresh(2)
        ops.batchnorm3d(T(x), T(np.ones(2)), T(np.zeros(2)), st, True)
        count = x.size // 2
        mu = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4)) * count / (count - 1)
        np.testing.assert_allclose(st.running_mean, 0.1 * mu, rtol=1e-5)
        np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * var, rtol=1e-5)

    def test_eval_needs_stats(self):
        with pytest.raises(StateError):
            ops.batchnorm3d(T(np.ones((1, 1, 1, 1, 1))), T([1.0]), T([0.0]), BNState(), False)

    def test_eval_is_deterministic_affine(self, rng):
        st = BNState(rng.standard_normal(2).astype(np.float32), rng.uniform(0.5, 2, 2).astype(np.float32))
        x = T(rng.standard_normal((2, 2, 2, 2, 2)))
        g, b = T(rng.standard_normal(2)), T(rng.standard_normal(2))
        y1 = ops.batchnorm3d(x, g, b, st, False).data
        y2 = ops.batchnorm3d(x, g, b, st, False).data
        np.testing.assert_array_equal(y1, y2)


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(T([-1.0, 2.0])).data, [0.0, 2.0])

    def test_sigmoid_values(self):
        assert ops.sigmoid(T([0.0])).data[0] == 0.5
        s = ops.sigmoid(T([20.0, -20.0])).data
        assert abs(s[0] - 1) < 1e-8 and abs(s[1]) < 1e-8

    def test_sigmoid_derivative_at_zero(self):
        x = T([0.0], grad=True)
        with Tape(np.float64) as tape:
            y = ops.sum(ops.sigmoid(x))
        tape.backward(y)
        assert x.grad[0] == 0.25


class TestPooling:
    def test_maxpool_constant(self):
        y = ops.maxpool3d(T(np.full((1, 2, 4, 4, 4), 3.0)), 3, 2, 1)
        np.testing.assert_array_equal(y.data, 3.0)

    def test_maxpool_2x2(self):
        y = ops.maxpool3d(T([[[[[1.0, 2.0], [3.0, 4.0]]]]]), (1, 2, 2), 1, 0)
        assert y.data.item() == 4.0

    def test_maxpool_oracle(self, rng):
        x = rng.standard_normal((2, 2, 5, 6, 7))
        np.testing.assert_array_equal(ops.maxpool3d(T(x), 3, 2, 1).data, oracles.maxpool_loops(x, 3, 2, 1))

    def test_gap_spatial_plane(self):
        y = ops.gap_spatial(T(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)))
        assert y.shape == (1, 1, 1, 1, 1) and y.data.item() == 2.5

    def test_gap_spatial_constant_and_oracle(self, rng):
        np.testing.assert_array_equal(ops.gap_spatial(T(np.full((1, 2, 3, 4, 5), 1.5))).data, 1.5)
        x = rng.standard_normal((2, 3, 4, 5, 6))
        np.testing.assert_allclose(ops.gap_spatial(T(x)).data, oracles.gap_spatial_loops(x), atol=1e-13)

    def test_gap_global(self, rng):
        np.testing.assert_array_equal(ops.gap_global(T(np.full((1, 1, 2, 2, 2), -4.0))).data, [[-4.0]])
        assert ops.gap_global(T(np.array([0.0, 1.0]).reshape(1, 1, 2, 1, 1))).data.item() == 0.5
        x = rng.standard_normal((2, 3, 2, 3, 4))
        np.testing.assert_allclose(ops.gap_global(T(x)).data, oracles.gap_global_loops(x), atol=1e-13)

    @settings(max_examples=25, deadline=None)
    @given(alpha=st.floats(-10, 10, allow_nan=False), seed=st.integers(0, 1000))
    def test_gap_spatial_commutes_with_scaling(self, alpha, seed):
        x = np.random.default_rng(seed).standard_normal((1, 2, 3, 2, 2))
        np.testing.assert_allclose(ops.gap_spatial(T(alpha * x)).data, alpha * ops.gap_spatial(T(x)).data,
                                   rtol=1e-12, atol=1e-12)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ops.softmax_cross_entropy(T(np.zeros((2, 3))), np.array([0, 2]))
        assert loss.data.item() == pytest.approx(math.log(3), abs=1e-15)

    def test_large_logit_is_stable(self):
        loss = ops.softmax_cross_entropy(T([[1000.0, 0.0, 0.0]]), np.array([0]))
        assert math.isfinite(loss.data.item()) and loss.data.item() < 1e-12

    def test_extended_precision_oracle(self, rng):
        z, y = rng.standard_normal((4, 3)) * 3, np.array([0, 2, 1, 2])
        assert ops.softmax_cross_entropy(T(z), y).data.item() == pytest.approx(
            oracles.cross_entropy_exact(z, y), rel=1e-13)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            ops.softmax_cross_entropy(T(np.zeros((1, 3))), np.array([3]))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(0, 2))
    def test_nonnegative(self, row, label):
        assert ops.softmax_cross_entropy(T([row]), np.array([label])).data.item() >= 0


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = T(rng.standard_normal((2, 3)), grad=True)
        with Tape(np.float64) as tape:
            y = ops.sum(x)
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_non_scalar_root(self):
        x = T(np.ones(3), grad=True)
        with Tape() as tape:
            y = ops.relu(x)
        with pytest.raises(UsageError):
            tape.backward(y)

    def test_leaves_without_grad_get_none(self, rng):
        x, w = T(rng.standard_normal((2, 3)), grad=True), T(rng.standard_normal((4, 3)))
        with Tape(np.float64) as tape:
            y = ops.sum(ops.linear(x, w))
        tape.backward(y)
        assert x.grad is not None and w.grad is None

    def test_double_backward_accumulates(self, rng):
        x = T(rng.standard_normal((1, 2, 3, 3, 3)), grad=True)
        w = T(rng.standard_normal((2, 2, 3, 3, 3)), grad=True)
        with Tape(np.float64) as tape:
            y = ops.sum(ops.sigmoid(ops.conv3d(x, ConvSpec(2, 2), w)))
        tape.backward(y)
        once = w.grad.copy(), x.grad.copy()
        tape.backward(y)
        np.testing.assert_array_equal(w.grad, 2 * once[0])
        np.testing.assert_array_equal(x.grad, 2 * once[1])

    def test_topological_order(self, rng):
        x = T(rng.standard_normal((2, 3)), grad=True)
        with Tape() as tape:
            ops.sum(ops.relu(ops.linear(x, T(rng.standard_normal((3, 3))))))
        seen = set()
        for node in tape.nodes:
            for inp in node.inputs:
                assert id(inp) in seen or not any(inp is n.output for n in tape.nodes)
            seen.add(id(node.output))

    def test_no_tape_no_graph(self, rng):
        x = T(rng.standard_normal(3), grad=True)
        assert not ops.relu(x).requires_grad


class TestGradCheck:
    def test_linear_exact(self, rng):
        rep = grad_check(ops.linear, [T(rng.standard_normal((3, 4))), T(rng.standard_normal((2, 4)))])
        assert rep.max_rel_error < 1e-7

    def test_relu_away_from_zero(self, rng):
        x = rng.standard_normal((4, 5))
        x = np.where(x >= 0, x + 1e-3, x - 1e-3)  # |x| > 10 * eps
        assert grad_check(ops.relu, [T(x)]).max_rel_error < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_conv3d(self, seed):
        r = np.random.default_rng(seed)
        spec = ConvSpec(2, 2, 3, 1, 1)
        rep = grad_check(lambda x, w: ops.conv3d(x, spec, w),
                         [T(r.standard_normal((1, 2, 3, 4, 4))), T(r.standard_normal(spec.weight_shape))], seed=seed)
        assert rep.max_rel_error < 1e-4
