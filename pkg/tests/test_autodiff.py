"""Tensor-core op semantics: spec examples and invariants."""

import numpy as np
import pytest

from medlitenet import autodiff as ad
from medlitenet.autodiff import (
    BatchNormState,
    Conv2dSpec,
    Graph,
    ShapeError,
    Tensor,
    backward,
)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_identity_kernel_bitwise(self):
        x = Tensor(rng(1).uniform(-2, 2, (2, 3, 6, 6)).astype(np.float32))
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = ad.conv2d(x, Tensor(w), Conv2dSpec(3, 3, 3, groups=1))
        assert np.array_equal(out.data, x.data)

    def test_all_ones_3x3(self):
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = ad.conv2d(x, w, Conv2dSpec(1, 1, 3))
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float32)
        assert np.array_equal(out.data[0, 0], expected)

    def test_dilated_center(self):
        x = Tensor(np.ones((1, 1, 5, 5), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = ad.conv2d(x, w, Conv2dSpec(1, 1, 3, dilation=2))
        assert out.shape == (1, 1, 5, 5)
        assert out.data[0, 0, 2, 2] == 9.0

    @pytest.mark.parametrize("spec,shape", [
        (Conv2dSpec(5, 4, 3), (2, 5, 7, 7)),
        (Conv2dSpec(4, 4, 3, stride=2), (1, 4, 8, 8)),
        (Conv2dSpec(4, 4, 3, dilation=2), (1, 4, 9, 9)),
        (Conv2dSpec(6, 6, 3, groups=6), (2, 6, 6, 6)),
        (Conv2dSpec(6, 4, 3, groups=2, stride=2, dilation=2), (1, 6, 9, 9)),
        (Conv2dSpec(3, 7, 1), (2, 3, 5, 5)),
    ])
    def test_fast_path_matches_direct(self, spec, shape):
        r = rng(3)
        x = Tensor(r.uniform(-2, 2, shape).astype(np.float32))
        w = Tensor(r.uniform(-1, 1, spec.weight_shape).astype(np.float32))
        bias = Tensor(r.uniform(-1, 1, spec.out_channels).astype(np.float32))
        fast = ad.conv2d(x, w, spec, bias)
        ref = ad.conv2d_direct(x, w, spec, bias)
        assert np.abs(fast.data - ref.data).max() < 1e-5

    def test_weight_count_decomposition(self):
        dense = Conv2dSpec(16, 16, 3)
        depthwise = Conv2dSpec(16, 16, 3, groups=16)
        assert dense.weight_count() == 9 * 16 * 16
        assert depthwise.weight_count() == 9 * 16
        assert depthwise.depthwise

    def test_shape_diagnostics(self):
        x = Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
        w = Tensor(np.zeros((2, 3, 3, 3), dtype=np.float32))
        with pytest.raises(ShapeError, match="channels"):
            ad.conv2d(x, w, Conv2dSpec(4, 2, 3))
        with pytest.raises(ShapeError, match="stride"):
            Conv2dSpec(3, 2, 3, stride=0)
        with pytest.raises(ShapeError, match="dilation"):
            Conv2dSpec(3, 2, 3, dilation=-1)
        with pytest.raises(ShapeError, match="groups"):
            Conv2dSpec(3, 2, 3, groups=2)

    def test_forward_deterministic(self):
        r = rng(5)
        x = Tensor(r.uniform(-1, 1, (2, 4, 8, 8)).astype(np.float32))
        w = Tensor(r.uniform(-1, 1, (4, 4, 3, 3)).astype(np.float32))
        spec = Conv2dSpec(4, 4, 3)
        a = ad.conv2d(x, w, spec).data
        b = ad.conv2d(x, w, spec).data
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# batchnorm2d
# ---------------------------------------------------------------------------

class TestBatchNorm:
    def test_eval_identity_with_initial_stats(self):
        x = Tensor(rng(0).uniform(-2, 2, (2, 3, 4, 4)).astype(np.float32))
        out = ad.batchnorm2d(x, Tensor(np.ones(3, np.float32)),
                             Tensor(np.zeros(3, np.float32)),
                             BatchNormState.initial(3), training=False)
        # identity up to the eps term: x / sqrt(1 + 1e-5)
        assert np.abs(out.data - x.data).max() < 2e-5

    def test_train_normalizes(self):
        x = Tensor(rng(1).uniform(-3, 3, (4, 5, 6, 6)).astype(np.float32))
        out = ad.batchnorm2d(x, Tensor(np.ones(5, np.float32)),
                             Tensor(np.zeros(5, np.float32)),
                             BatchNormState.initial(5), training=True)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-4
        assert np.abs(var - 1).max() < 1e-3

    def test_constant_channel_maps_to_zero(self):
        x = Tensor(np.full((2, 1, 3, 3), 7.0, dtype=np.float32))
        out = ad.batchnorm2d(x, Tensor(np.ones(1, np.float32)),
                             Tensor(np.zeros(1, np.float32)),
                             BatchNormState.initial(1), training=True)
        assert np.abs(out.data).max() < 1e-4

    def test_running_stats_update(self):
        state = BatchNormState.initial(2)
        x = Tensor(rng(2).normal(3.0, 2.0, (8, 2, 4, 4)).astype(np.float32))
        ad.batchnorm2d(x, Tensor(np.ones(2, np.float32)),
                       Tensor(np.zeros(2, np.float32)), state, training=True)
        batch_mean = x.data.mean(axis=(0, 2, 3))
        assert np.allclose(state.mean, 0.1 * batch_mean, atol=1e-6)


# ---------------------------------------------------------------------------
# activations / softmax
# ---------------------------------------------------------------------------

class TestActivations:
    def test_known_values(self):
        assert ad.silu(Tensor(np.float32(0.0))).item() == 0.0
        assert ad.sigmoid(Tensor(np.float32(0.0))).item() == 0.5
        assert ad.relu(Tensor(np.float32(-3.0))).item() == 0.0
        assert abs(ad.silu(Tensor(np.float32(1.0))).item() - 0.73106) < 1e-4

    def test_sigmoid_saturation_safe(self):
        with np.errstate(over="raise"):
            out = ad.sigmoid(Tensor(np.array([40.0, -40.0], np.float32)))
        assert out.data[0] == pytest.approx(1.0)
        assert out.data[1] == pytest.approx(0.0, abs=1e-15)

    def test_activation_dispatch(self):
        x = Tensor(np.array([0.5], np.float32))
        assert ad.activation(x, "relu").item() == 0.5
        with pytest.raises(ValueError):
            ad.activation(x, "tanh")

    def test_softmax_examples(self):
        out = ad.softmax(Tensor(np.array([0.0, np.log(2.0)], np.float32)), 0)
        assert np.allclose(out.data, [1 / 3, 2 / 3], atol=1e-6)
        big = ad.softmax(Tensor(np.array([1000.0, 1000.0], np.float32)), 0)
        assert np.allclose(big.data, [0.5, 0.5])
        assert np.isfinite(big.data).all()

    def test_softmax_properties(self):
        x = Tensor(rng(4).uniform(-5, 5, (3, 7)).astype(np.float32))
        out = ad.softmax(x, axis=1)
        assert (out.data >= 0).all()
        assert np.abs(out.data.sum(axis=1) - 1).max() < 1e-6
        shifted = ad.softmax(Tensor(x.data + 3.25), axis=1)
        assert np.abs(out.data - shifted.data).max() < 1e-6

    def test_uniform_row(self):
        out = ad.softmax(Tensor(np.full((4,), 1.7, np.float32)), 0)
        assert np.allclose(out.data, 0.25)


# ---------------------------------------------------------------------------
# matmul / shape ops / pooling
# ---------------------------------------------------------------------------

class TestLinearAlgebraOps:
    def test_matmul_identity(self):
        a = Tensor(rng(0).uniform(-1, 1, (3, 4)).astype(np.float32))
        out = ad.matmul(a, Tensor(np.eye(4, dtype=np.float32)))
        assert np.allclose(out.data, a.data, atol=1e-6)

    def test_matmul_hand_values(self):
        a = Tensor(np.array([[1, 2], [3, 4]], np.float32))
        b = Tensor(np.array([[5, 6], [7, 8]], np.float32))
        assert np.array_equal(ad.matmul(a, b).data,
                              np.array([[19, 22], [43, 50]], np.float32))

    def test_row_times_column_is_dot(self):
        row = Tensor(np.array([[1.0, 2.0, 3.0]], np.float32))
        col = Tensor(np.array([[4.0], [5.0], [6.0]], np.float32))
        assert ad.matmul(row, col).item() == pytest.approx(32.0)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match="inner dims"):
            ad.matmul(Tensor(np.zeros((2, 3), np.float32)),
                      Tensor(np.zeros((4, 2), np.float32)))

    def test_upsample_examples(self):
        single = ad.upsample_bilinear(Tensor(np.full((1, 1, 1, 1), 5.0,
                                                     np.float32)))
        assert np.array_equal(single.data, np.full((1, 1, 2, 2), 5.0))
        row = ad.upsample_bilinear(Tensor(np.array([[[[0.0, 1.0]]]], np.float32)))
        assert np.allclose(row.data[0, 0, 0], [0.0, 0.25, 0.75, 1.0])
        const = ad.upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 2.5,
                                                    np.float32)))
        assert const.shape == (1, 2, 6, 6)
        assert np.allclose(const.data, 2.5)

    def test_global_avg_pool(self):
        const = ad.global_avg_pool(Tensor(np.full((1, 2, 4, 4), 3.0, np.float32)))
        assert np.allclose(const.data, 3.0)
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32),
                   requires_grad=True)
        with Graph() as g:
            out = ad.global_avg_pool(x)
            assert out.item() == pytest.approx(2.5)
            backward(ad.tsum(out), g)
        assert np.allclose(x.grad, 0.25)

    def test_concat_channels(self):
        a = Tensor(rng(1).uniform(0, 1, (1, 2, 4, 4)).astype(np.float32))
        b = Tensor(rng(2).uniform(0, 1, (1, 3, 4, 4)).astype(np.float32))
        out = ad.concat_channels([a, b])
        assert out.shape == (1, 5, 4, 4)
        assert np.array_equal(out.data[:, :2], a.data)
        assert np.array_equal(out.data[:, 2:], b.data)
        assert np.array_equal(ad.concat_channels([a]).data, a.data)
        with pytest.raises(ShapeError, match="spatial"):
            ad.concat_channels([a, Tensor(np.zeros((1, 1, 3, 3), np.float32))])


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(rng(0).uniform(-1, 1, (3, 4)).astype(np.float32),
                   requires_grad=True)
        with Graph() as g:
            backward(ad.tsum(x), g)
        assert np.array_equal(x.grad, np.ones((3, 4), np.float32))

    def test_elementwise_square(self):
        x = Tensor(rng(1).uniform(-1, 1, (5,)).astype(np.float32),
                   requires_grad=True)
        with Graph() as g:
            backward(ad.tsum(ad.mul(x, x)), g)
        assert np.allclose(x.grad, 2 * x.data, atol=1e-6)

    def test_double_backward_accumulates_exactly_twice(self):
        x = Tensor(rng(2).uniform(-1, 1, (4, 4)).astype(np.float32),
                   requires_grad=True)
        with Graph() as g:
            loss = ad.tsum(ad.silu(ad.mul(x, x)))
            backward(loss, g)
            once = x.grad.copy()
            backward(loss, g)
        assert np.array_equal(x.grad, 2 * once)

    def test_non_scalar_rejected(self):
        x = Tensor(np.zeros((2, 2), np.float32), requires_grad=True)
        with Graph() as g:
            y = ad.mul(x, x)
            with pytest.raises(ad.AutodiffError, match="scalar"):
                backward(y, g)

    def test_no_graph_no_recording(self):
        x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        y = ad.mul(x, x)
        assert y.creator is None
        assert not y.requires_grad

    def test_grad_flows_through_shared_operand(self):
        x = Tensor(np.array([3.0], np.float32), requires_grad=True)
        with Graph() as g:
            backward(ad.tsum(ad.mul(x, x)), g)   # both operands are x
        assert x.grad[0] == pytest.approx(6.0)
