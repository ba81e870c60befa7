import numpy as np
import pytest

from src.errors import DimensionError, StateError
from src.tensor import Tensor
from src.tensor import functional as F
from src.tensor.functional import RunningStats


def _conv_reference(x, w, b, stride, padding):
    batch, cin, height, width = x.shape
    cout, _, k, _ = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    out = np.zeros((batch, cout, out_h, out_w))
    for n in range(batch):
        for o in range(cout):
            for i in range(out_h):
                for j in range(out_w):
                    patch = padded[n, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


class TestConvolutions:
    """Unit tests for the convolution primitives"""

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_conv2d_matches_loop(self, stride, padding):
        """Test conv2d against a direct nested-loop cross-correlation"""
        rng = np.random.default_rng(0)
        x, w, b = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, _conv_reference(x, w, b, stride, padding), atol=1e-10)

    def test_conv2d_rejects_even_kernel(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))

    def test_conv2d_rejects_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), padding=1)

    def test_dwconv_identity_kernel(self):
        """Test that a centered unit kernel leaves the input unchanged"""
        x = np.random.default_rng(1).standard_normal((2, 3, 5, 5))
        w = np.zeros((3, 1, 3, 3))
        w[:, 0, 1, 1] = 1.0
        out = F.dwconv2d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, x)

    def test_transpose_conv_spreads_blocks(self):
        """Test that every input pixel writes one k x k block scaled by the kernel"""
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = np.arange(4.0).reshape(1, 1, 2, 2)
        out = F.transpose_conv2d(Tensor(x), Tensor(w), stride=2)
        assert out.shape == (1, 1, 4, 4)
        np.testing.assert_allclose(out.data[0, 0, 2:, :2], 3.0 * w[0, 0])
        np.testing.assert_allclose(out.data[0, 0, :2, 2:], 2.0 * w[0, 0])

    def test_transpose_conv_requires_kernel_equal_stride(self):
        with pytest.raises(DimensionError):
            F.transpose_conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), stride=2)


class TestNormalization:
    """Unit tests for layer and batch normalization"""

    def test_layer_norm_statistics(self):
        x = np.random.default_rng(0).standard_normal((4, 8)) * 3.0 + 2.0
        out = F.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)

    def test_batch_norm_updates_running_stats(self):
        """Test that train mode folds batch statistics into the running estimates"""
        x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)) + 5.0
        stats = RunningStats.fresh(2, dtype=np.float64)
        F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats=stats, training=True, momentum=0.1)
        np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
        assert stats.num_batches == 1

    def test_batch_norm_eval_uses_running_stats(self):
        stats = RunningStats(mean=np.array([1.0]), var=np.array([4.0]))
        x = np.full((1, 1, 2, 2), 3.0)
        out = F.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), stats=stats, training=False, eps=0.0)
        np.testing.assert_allclose(out.data, 1.0)

    def test_batch_norm_eval_without_stats_raises(self):
        with pytest.raises(StateError):
            F.batch_norm(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), training=False)


class TestNonlinearities:
    """Unit tests for activations and softmax"""

    def test_softmax_is_distribution(self):
        x = np.random.default_rng(0).standard_normal((3, 5)) * 50.0
        out = F.softmax(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0)
        assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_log_softmax_matches_log_of_softmax(self):
        x = np.random.default_rng(1).standard_normal((3, 5))
        np.testing.assert_allclose(F.log_softmax(Tensor(x)).data, np.log(F.softmax(Tensor(x)).data), atol=1e-12)

    def test_gelu_values(self):
        out = F.gelu(Tensor(np.array([0.0, 10.0, -10.0]))).data
        np.testing.assert_allclose(out, [0.0, 10.0, 0.0], atol=1e-10)

    def test_relu(self):
        np.testing.assert_allclose(F.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0.0, 0.0, 2.0])


class TestBilinearSample:
    """Unit tests for normalized-coordinate bilinear sampling"""

    def test_pixel_center_returns_pixel(self):
        """Test that a point at a pixel center reads exactly that pixel"""
        fm = np.arange(16.0).reshape(1, 1, 4, 4)
        points = np.array([[[(2 + 0.5) / 4, (1 + 0.5) / 4]]])
        out = F.bilinear_sample(Tensor(fm), Tensor(points))
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == pytest.approx(fm[0, 0, 2, 1])

    def test_midpoint_interpolates(self):
        fm = np.array([[[[0.0, 2.0], [4.0, 6.0]]]])
        out = F.bilinear_sample(Tensor(fm), Tensor(np.array([[[0.5, 0.5]]])))
        assert out.data[0, 0, 0] == pytest.approx(3.0)

    def test_clamped_points_have_zero_coordinate_gradient(self):
        """Test that points beyond the outer pixel centers clamp to the border"""
        fm = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        points = Tensor(np.array([[[0.0, 0.0], [1.0, 1.0]]]), requires_grad=True)
        out = F.bilinear_sample(fm, points)
        np.testing.assert_allclose(out.data[0, :, 0], [0.0, 3.0])
        out.sum().backward()
        np.testing.assert_allclose(points.grad, 0.0)
        assert fm.grad.sum() == pytest.approx(2.0)

    def test_rejects_batch_mismatch(self):
        with pytest.raises(DimensionError):
            F.bilinear_sample(Tensor(np.ones((2, 1, 2, 2))), Tensor(np.ones((1, 3, 2))))


class TestWorkedExamples:
    """Hand-computed values for each primitive"""

    def test_conv2d_ones_kernel_counts_neighbors(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == 4.0 and out[2, 2] == 4.0
        assert out[0, 1] == 6.0 and out[1, 0] == 6.0

    def test_conv2d_zero_weight(self):
        out = F.conv2d(Tensor(np.ones((2, 3, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), stride=2)
        assert out.shape == (2, 4, 2, 2)
        assert not out.data.any()

    def test_dwconv_mean_kernel_on_ramp(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out = F.dwconv2d(Tensor(x), Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0)), Tensor(np.zeros(1)))
        assert out.data[0, 0, 1, 1] == pytest.approx(4.0)

    def test_dwconv_channels_are_independent(self):
        x = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
        w = np.zeros((2, 1, 3, 3))
        w[1, 0, 1, 1] = 1.0
        out = F.dwconv2d(Tensor(x), Tensor(w), Tensor(np.array([0.5, 0.0]))).data
        np.testing.assert_allclose(out[0, 0], 0.5)
        np.testing.assert_allclose(out[0, 1], x[0, 1])

    def test_transpose_conv_broadcast_upsample(self):
        out = F.transpose_conv2d(Tensor(np.array([[[[2.0]]]])), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 2.0))

    def test_transpose_conv_is_adjoint_of_pointwise_conv(self):
        """Test <conv2d(a), b> == <a, transpose_conv2d(b)> for a shared 1x1 kernel"""
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 2, 4, 4))
        w = rng.standard_normal((2, 3, 1, 1))
        lhs = np.sum(F.conv2d(Tensor(a), Tensor(w)).data * b)
        rhs = np.sum(a * F.transpose_conv2d(Tensor(b), Tensor(w), stride=1).data)
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_transpose_conv_adjoint_via_backward(self):
        """Test the stride-2 operator against its own vector-Jacobian product"""
        rng = np.random.default_rng(1)
        b = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 3, 2, 2)))
        a = rng.standard_normal((1, 3, 6, 6))
        out = F.transpose_conv2d(b, w, stride=2)
        out.backward(a)
        assert np.sum(out.data * a) == pytest.approx(np.sum(b.data * b.grad), rel=1e-10)

    def test_linear_hand_computed(self):
        out = F.linear(Tensor(np.array([1.0, 2.0])), Tensor(np.array([[1.0, 0.0], [0.0, 2.0]])), Tensor(np.ones(2)))
        np.testing.assert_allclose(out.data, [2.0, 5.0])

    def test_linear_rejects_trailing_mismatch(self):
        with pytest.raises(DimensionError):
            F.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_layer_norm_examples(self):
        ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
        np.testing.assert_allclose(F.layer_norm(Tensor(np.array([-1.0, 1.0])), ones, zeros, eps=0.0).data, [-1.0, 1.0])
        np.testing.assert_allclose(F.layer_norm(Tensor(np.full(2, 3.0)), ones, zeros).data, [0.0, 0.0])

    def test_batch_norm_examples(self):
        x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2)
        out = F.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), training=True, eps=0.0)
        np.testing.assert_allclose(out.data, x)
        const = F.batch_norm(Tensor(np.full((2, 1, 2, 2), 7.0)), Tensor(np.ones(1)), Tensor(np.array([0.3])), training=True)
        np.testing.assert_allclose(const.data, 0.3)

    def test_softmax_closed_form(self):
        np.testing.assert_allclose(F.softmax(Tensor(np.array([0.0, np.log(3.0)]))).data, [0.25, 0.75])
        np.testing.assert_allclose(F.softmax(Tensor(np.array([1000.0, 0.0]))).data, [1.0, 0.0])
        np.testing.assert_allclose(F.softmax(Tensor(np.zeros(5))).data, np.full(5, 0.2))

    def test_relu_is_idempotent(self):
        x = Tensor(np.array([-3.0, 0.0, 3.0]))
        np.testing.assert_array_equal(F.relu(F.relu(x)).data, F.relu(x).data)

    def test_bilinear_common_corner(self):
        fm = np.array([[[[0.0, 0.0], [4.0, 4.0]]]])
        out = F.bilinear_sample(Tensor(fm), Tensor(np.array([[[0.5, 0.5]]])))
        assert out.data[0, 0, 0] == pytest.approx(2.0)

    def test_bilinear_rejects_empty_map(self):
        with pytest.raises(DimensionError):
            F.bilinear_sample(Tensor(np.ones((1, 1, 0, 2))), Tensor(np.ones((1, 1, 2))))
