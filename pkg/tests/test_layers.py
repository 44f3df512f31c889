import numpy as np
import numpy.testing as npt
import pytest

from volnet import gradcheck
from volnet.layers import (FC, BatchNorm3D, Conv3D, GlobalAvgPool, MaxPool3D,
                           softmax, softmax_crossentropy)
from volnet.tensor import ShapeError

from oracles import naive_conv3d


def rng64(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


class TestConv3D:
    def test_all_ones_kernel_sums_patch(self):
        conv = Conv3D("c", 1, 1, kernel=3, stride=1, padding=0, dtype="f64")
        conv.w.data[...] = 1.0
        conv.b.data[...] = 0.0
        out = conv.forward(np.ones((1, 1, 3, 3, 3)))
        assert out.shape == (1, 1, 1, 1, 1)
        assert out[0, 0, 0, 0, 0] == 27.0

    def test_dirac_kernel_is_identity(self):
        conv = Conv3D("c", 1, 1, kernel=3, stride=1, padding=1, dtype="f64")
        conv.w.data[...] = 0.0
        conv.w.data[0, 0, 1, 1, 1] = 1.0
        conv.b.data[...] = 0.0
        x = rng64(1).normal(size=(2, 1, 4, 4, 4))
        npt.assert_array_equal(conv.forward(x), x)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, 1)])
    def test_matches_naive_loop_oracle(self, stride, padding):
        rng = rng64(2)
        conv = Conv3D("c", 2, 3, kernel=3, stride=stride, padding=padding,
                      dtype="f64", rng=rng)
        x = rng.normal(size=(1, 2, 5, 5, 5))
        want = naive_conv3d(x, conv.w.data, conv.b.data, stride, padding)
        assert np.abs(conv.forward(x) - want).max() < 1e-10

    def test_kernel_one(self):
        rng = rng64(3)
        conv = Conv3D("c", 3, 2, kernel=1, stride=1, padding=0, dtype="f64", rng=rng)
        x = rng.normal(size=(2, 3, 3, 3, 3))
        want = naive_conv3d(x, conv.w.data, conv.b.data, 1, 0)
        assert np.abs(conv.forward(x) - want).max() < 1e-12

    def test_nonpositive_output_dims_error_reports_dims(self):
        conv = Conv3D("c", 1, 1, kernel=3, stride=1, padding=0)
        with pytest.raises(ShapeError, match="0"):
            conv.forward(np.zeros((1, 1, 2, 2, 2), dtype=np.float32))

    def test_kernel_size_restricted(self):
        with pytest.raises(ValueError):
            Conv3D("c", 1, 1, kernel=5)

    def test_zero_grad_out_gives_zero_grads(self):
        conv = Conv3D("c", 1, 2, dtype="f64", rng=rng64(4))
        x = rng64(5).normal(size=(1, 1, 3, 3, 3))
        out = conv.forward(x)
        dx = conv.backward(np.zeros_like(out))
        npt.assert_array_equal(dx, 0.0)
        npt.assert_array_equal(conv.w.grad, 0.0)
        npt.assert_array_equal(conv.b.grad, 0.0)

    def test_bias_grad_is_voxel_count_on_ones(self):
        conv = Conv3D("c", 1, 2, dtype="f64", rng=rng64(6))
        x = rng64(7).normal(size=(2, 1, 3, 3, 3))
        out = conv.forward(x)
        conv.backward(np.ones_like(out))
        voxels = out.shape[0] * out.shape[2] * out.shape[3] * out.shape[4]
        npt.assert_array_equal(conv.b.grad, float(voxels))

    def test_backward_matches_finite_differences(self):
        assert gradcheck.check_conv3d(seed=0) < 1e-6

    def test_grad_shape_mismatch(self):
        conv = Conv3D("c", 1, 1)
        conv.forward(np.zeros((1, 1, 4, 4, 4), dtype=np.float32))
        with pytest.raises(ShapeError):
            conv.backward(np.zeros((1, 1, 3, 3, 3), dtype=np.float32))


def test_three_stacked_convs_have_7cube_receptive_field():
    convs = []
    for i in range(3):
        c = Conv3D(f"c{i}", 1, 1, kernel=3, stride=1, padding=3 // 2, dtype="f64")
        c.w.data[...] = 1.0
        c.b.data[...] = 0.0
        convs.append(c)
    x = np.zeros((1, 1, 15, 15, 15))
    x[0, 0, 7, 7, 7] = 1.0
    out = x
    for c in convs:
        out = c.forward(out)
    support = np.argwhere(out[0, 0] != 0)
    assert support.min(axis=0).tolist() == [4, 4, 4]
    assert support.max(axis=0).tolist() == [10, 10, 10]
    assert len(support) == 7 ** 3


class TestBatchNorm3D:
    def test_train_mode_normalizes(self):
        bn = BatchNorm3D("b", 3, dtype="f64")
        x = rng64(8).normal(loc=2.0, scale=3.0, size=(4, 3, 4, 4, 4))
        out = bn.forward(x, "train")
        mean = out.mean(axis=(0, 2, 3, 4))
        var = out.var(axis=(0, 2, 3, 4))
        assert np.abs(mean).max() < 1e-6
        assert np.abs(var - 1).max() < 1e-4

    def test_eval_constant_input_gives_beta(self):
        bn = BatchNorm3D("b", 2, dtype="f64")
        bn.beta.data[...] = [0.5, -1.5]
        c = 3.7
        bn.running_mean[...] = c
        bn.running_var[...] = 1.0
        x = np.full((2, 2, 2, 2, 2), c)
        out = bn.forward(x, "eval")
        npt.assert_allclose(out[:, 0], 0.5, atol=1e-12)
        npt.assert_allclose(out[:, 1], -1.5, atol=1e-12)

    def test_single_element_train_mode_rejected(self):
        bn = BatchNorm3D("b", 2)
        with pytest.raises(ShapeError):
            bn.forward(np.zeros((1, 2, 1, 1, 1), dtype=np.float32), "train")

    def test_running_stats_update(self):
        bn = BatchNorm3D("b", 1, momentum=0.1, dtype="f64")
        x = np.full((2, 1, 2, 2, 2), 10.0)
        bn.forward(x + rng64(9).normal(size=x.shape) * 0.01, "train")
        assert 0.9 < bn.running_mean[0] < 1.1  # 0.9*0 + 0.1*~10

    def test_backward_matches_finite_differences(self):
        assert gradcheck.check_batchnorm3d(seed=0) < 1e-6

    def test_invalid_hyperparams(self):
        with pytest.raises(ValueError):
            BatchNorm3D("b", 1, momentum=1.5)
        with pytest.raises(ValueError):
            BatchNorm3D("b", 1, epsilon=0.0)


class TestFC:
    def test_identity_weights(self):
        fc = FC("f", 3, 3, dtype="f64")
        fc.w.data[...] = np.eye(3)
        fc.b.data[...] = 0.0
        x = rng64(10).normal(size=(2, 3))
        npt.assert_array_equal(fc.forward(x), x)

    def test_zero_input_gives_bias(self):
        fc = FC("f", 3, 2, dtype="f64", rng=rng64(11))
        fc.b.data[...] = [1.0, -2.0]
        out = fc.forward(np.zeros((4, 3)))
        npt.assert_array_equal(out, np.tile([1.0, -2.0], (4, 1)))

    def test_feature_count_mismatch(self):
        fc = FC("f", 3, 2)
        with pytest.raises(ShapeError):
            fc.forward(np.zeros((2, 4), dtype=np.float32))

    def test_backward_matches_finite_differences(self):
        assert gradcheck.check_fc(seed=0) < 1e-6


class TestSoftmaxCrossentropy:
    def test_uniform_logits_two_classes(self):
        loss, _ = softmax_crossentropy(np.zeros((3, 2)), np.array([0, 1, 0]))
        assert abs(loss - np.log(2)) < 1e-12

    def test_extreme_logits_stable(self):
        loss, grad = softmax_crossentropy(np.array([[1000.0, -1000.0]]),
                                          np.array([0]))
        assert loss < 1e-12
        assert np.all(np.isfinite(grad))

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            softmax_crossentropy(np.zeros((2, 2)), np.array([0, 2]))

    def test_grad_matches_finite_differences(self):
        assert gradcheck.check_softmax_crossentropy(seed=0) < 1e-6

    def test_softmax_rows_sum_to_one(self):
        logits = rng64(12).normal(size=(10, 2)) * 5
        rows = softmax(logits).sum(axis=1)
        npt.assert_allclose(rows, 1.0, atol=1e-6)


class TestMaxPool3D:
    def test_cell_max(self):
        x = np.zeros((1, 1, 2, 2, 2), dtype=np.float64)
        x[0, 0] = np.array([[[1, 2], [3, 4]], [[5, 6], [7, 8]]])
        pool = MaxPool3D("p")
        out = pool.forward(x)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out[0, 0, 0, 0, 0] == 8.0

    def test_constant_input_routes_gradient_to_first_voxel(self):
        pool = MaxPool3D("p")
        x = np.full((1, 1, 4, 4, 4), 2.0)
        out = pool.forward(x)
        npt.assert_array_equal(out, 2.0)
        dx = pool.backward(np.ones_like(out))
        # each 2^3 cell concentrates its gradient on the first voxel
        assert dx.sum() == 8.0
        for z in range(0, 4, 2):
            for y in range(0, 4, 2):
                for xx in range(0, 4, 2):
                    cell = dx[0, 0, z:z + 2, y:y + 2, xx:xx + 2]
                    assert cell[0, 0, 0] == 1.0
                    assert cell.sum() == 1.0

    def test_too_small_input(self):
        with pytest.raises(ShapeError):
            MaxPool3D("p").forward(np.zeros((1, 1, 1, 4, 4), dtype=np.float32))

    def test_backward_matches_finite_differences(self):
        assert gradcheck.check_maxpool3d(seed=0) < 1e-6


class TestGlobalAvgPool:
    def test_mean_and_backward(self):
        gap = GlobalAvgPool("g")
        x = rng64(13).normal(size=(2, 3, 2, 2, 2))
        out = gap.forward(x)
        npt.assert_allclose(out, x.mean(axis=(2, 3, 4)), atol=1e-12)
        dx = gap.backward(np.ones_like(out))
        npt.assert_allclose(dx, 1.0 / 8, atol=1e-12)
