"""逆伝播エンジンのテスト（中心差分との比較・形状エラー・Adam）"""
import numpy as np
import pytest

from lossprofile import ndgrad
from lossprofile.errors import ConfigurationError
from lossprofile.ndgrad import AdamState, BatchNormState, NetworkParams, adam_step, parameter

TOL = 1e-4


def _weights_like(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


class TestGradients:
    """各演算の勾配が中心差分と一致する（float64）"""

    @pytest.mark.parametrize("dilation", [1, 2, 4, 8])
    def test_conv2d_dilated(self, rng, gradcheck, dilation):
        x = parameter(rng.normal(size=(2, 2, 6, 6)))
        w = parameter(rng.normal(size=(3, 2, 3, 3)))
        b = parameter(rng.normal(size=(3,)))
        out_shape = ndgrad.conv2d(x, w, b, dilation=dilation, padding=dilation).shape
        r = _weights_like(out_shape)

        def loss():
            return ndgrad.weighted_sum(ndgrad.conv2d(x, w, b, dilation=dilation, padding=dilation), r)

        assert out_shape == (2, 3, 6, 6)
        assert max(gradcheck(loss, [x, w, b])) < TOL

    def test_conv2d_strided(self, rng, gradcheck):
        x = parameter(rng.normal(size=(1, 3, 6, 6)))
        w = parameter(rng.normal(size=(2, 3, 3, 3)))
        r = _weights_like((1, 2, 3, 3))

        def loss():
            return ndgrad.weighted_sum(ndgrad.conv2d(x, w, stride=2, padding=1), r)

        assert max(gradcheck(loss, [x, w])) < TOL

    def test_leaky_relu(self, rng, gradcheck):
        # 0 付近のキンクを避ける
        data = rng.normal(size=(2, 2, 4, 4))
        data[np.abs(data) < 0.05] = 0.5
        x = parameter(data)
        r = _weights_like(x.shape)
        assert gradcheck(lambda: ndgrad.weighted_sum(ndgrad.leaky_relu(x, 0.2), r), [x])[0] < TOL

    def test_batchnorm_train(self, rng, gradcheck):
        x = parameter(rng.normal(size=(3, 2, 4, 4)))
        state = BatchNormState.fresh(2, dtype=np.float64)
        r = _weights_like(x.shape)
        assert gradcheck(lambda: ndgrad.weighted_sum(ndgrad.batchnorm2d(x, state, True), r), [x])[0] < TOL

    def test_batchnorm_eval(self, rng, gradcheck):
        x = parameter(rng.normal(size=(1, 2, 4, 4)))
        state = BatchNormState(running_mean=np.array([0.1, -0.2]), running_var=np.array([2.0, 0.5]))
        r = _weights_like(x.shape)
        assert gradcheck(lambda: ndgrad.weighted_sum(ndgrad.batchnorm2d(x, state, False), r), [x])[0] < TOL

    def test_softmax_and_log_softmax(self, rng, gradcheck):
        x = parameter(rng.normal(size=(4, 9)))
        r = _weights_like(x.shape)
        assert gradcheck(lambda: ndgrad.weighted_sum(ndgrad.softmax(x), r), [x])[0] < TOL
        assert gradcheck(lambda: ndgrad.weighted_sum(ndgrad.log_softmax(x), r), [x])[0] < TOL

    def test_sigmoid(self, rng, gradcheck):
        x = parameter(rng.normal(size=(1, 1, 5, 5)))
        r = _weights_like(x.shape)
        assert gradcheck(lambda: ndgrad.weighted_sum(ndgrad.sigmoid(x), r), [x])[0] < TOL

    def test_mse_loss(self, rng, gradcheck):
        x = parameter(rng.normal(size=(2, 3, 4, 4)))
        target = rng.normal(size=x.shape)
        assert gradcheck(lambda: ndgrad.mse_loss(x, target), [x])[0] < TOL

    def test_weighted_bce(self, rng, gradcheck):
        x = parameter(rng.uniform(0.05, 0.95, size=(2, 1, 4, 4)))
        target = (rng.random(x.shape) > 0.5).astype(np.float64)
        assert gradcheck(lambda: ndgrad.weighted_bce(x, target, 0.4), [x])[0] < TOL

    def test_linear_upsample_chain(self, rng, gradcheck):
        x = parameter(rng.normal(size=(2, 1, 2, 2)))
        w = parameter(rng.normal(size=(16, 3)))
        b = parameter(rng.normal(size=(3,)))
        r = _weights_like((2, 3))

        def loss():
            up = ndgrad.upsample_nearest(x, 2)
            return ndgrad.weighted_sum(ndgrad.linear(ndgrad.flatten(up), w, b), r)

        assert max(gradcheck(loss, [x, w, b])) < TOL


class TestForwardContracts:
    """形状・値域の約束"""

    def test_sigmoid_stays_open_interval(self):
        out = ndgrad.sigmoid(np.array([[-1e4, 0.0, 1e4]])).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_softmax_rows_sum_to_one(self, rng):
        out = ndgrad.softmax(rng.normal(size=(5, 9)) * 50).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-6)

    def test_mse_zero_on_identical(self, rng):
        x = rng.random((1, 3, 4, 4))
        assert ndgrad.mse_loss(x, x).item() == 0.0

    def test_weighted_bce_near_zero_on_confident_prediction(self):
        target = np.array([[[[0.0, 1.0], [1.0, 0.0]]]])
        pred = np.clip(target, 1e-7, 1 - 1e-7)
        assert ndgrad.weighted_bce(pred, target, 1.0).item() < 1e-5

    def test_weighted_bce_decreases_with_alpha(self):
        target = np.array([[[[0.0, 1.0]]]])
        pred = np.array([[[[0.3, 0.6]]]])
        assert ndgrad.weighted_bce(pred, target, 0.2).item() < ndgrad.weighted_bce(pred, target, 0.9).item()

    def test_conv2d_channel_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            ndgrad.conv2d(rng.random((1, 2, 5, 5)), rng.random((1, 3, 3, 3)))

    def test_conv2d_output_too_small(self, rng):
        with pytest.raises(ConfigurationError):
            ndgrad.conv2d(rng.random((1, 1, 3, 3)), rng.random((1, 1, 3, 3)), dilation=2)

    def test_batchnorm_train_needs_two_samples(self, rng):
        with pytest.raises(ConfigurationError):
            ndgrad.batchnorm2d(rng.random((1, 2, 3, 3)), BatchNormState.fresh(2), True)

    def test_weighted_bce_rejects_soft_targets(self):
        with pytest.raises(ConfigurationError):
            ndgrad.weighted_bce(np.full((1, 1, 2, 2), 0.5), np.full((1, 1, 2, 2), 0.5), 1.0)

    def test_rank_limit(self):
        with pytest.raises(ConfigurationError):
            ndgrad.constant(np.zeros((1, 1, 1, 1, 1)))

    def test_dtype_preserved(self, rng):
        x = rng.random((1, 1, 4, 4)).astype(np.float32)
        w = rng.random((1, 1, 3, 3)).astype(np.float32)
        assert ndgrad.conv2d(x, w, padding=1).dtype == np.float32

    def test_conv2d_unit_kernel_is_identity(self, rng):
        x = rng.random((2, 1, 5, 5))
        np.testing.assert_array_equal(ndgrad.conv2d(x, np.ones((1, 1, 1, 1))).data, x)

    def test_conv2d_ones_kernel_sums(self):
        out = ndgrad.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3))).data
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_softmax_large_logit_does_not_overflow(self):
        logits = np.zeros((1, 9))
        logits[0, 0] = 1000.0
        with np.errstate(over="raise", invalid="raise"):
            out = ndgrad.softmax(logits).data
            log_out = ndgrad.log_softmax(logits).data
        assert out[0, 0] == pytest.approx(1.0)
        np.testing.assert_allclose(out[0, 1:], 0.0, atol=1e-300)
        assert np.all(np.isfinite(log_out))

    def test_softmax_equal_logits_uniform(self):
        np.testing.assert_allclose(ndgrad.softmax(np.full((1, 9), 3.0)).data, 1 / 9)

    def test_dropout_drop_fraction(self):
        x = np.ones((1, 1, 100, 1000))
        out = ndgrad.dropout(x, 0.3, True, np.random.default_rng(0)).data
        dropped = float(np.mean(out == 0.0))
        assert abs(dropped - 0.3) < 0.01
        np.testing.assert_allclose(out[out != 0.0], 1 / 0.7)

    def test_dropout_eval_and_zero_rate_are_identity(self, rng):
        x = rng.random((2, 3, 4, 4))
        np.testing.assert_array_equal(ndgrad.dropout(x, 0.3, False, None).data, x)
        np.testing.assert_array_equal(ndgrad.dropout(x, 0.0, True, rng).data, x)

    def test_repeated_backward_is_bit_identical(self):
        def gradients():
            rng = np.random.default_rng(3)
            x = parameter(rng.normal(size=(2, 2, 6, 6)))
            w = parameter(rng.normal(size=(3, 2, 3, 3)))
            state = BatchNormState.fresh(3, dtype=np.float64)
            h = ndgrad.batchnorm2d(ndgrad.leaky_relu(ndgrad.conv2d(x, w, dilation=2, padding=2), 0.2), state, True)
            ndgrad.mse_loss(ndgrad.sigmoid(h), np.full(h.shape, 0.5)).backward()
            return x.grad.tobytes(), w.grad.tobytes()

        assert gradients() == gradients()


class TestNetworkParams:
    """パラメータ集合と Adam"""

    def test_adam_moves_against_gradient(self):
        params = NetworkParams(np.float64)
        w = params.add("w", np.array([1.0, -1.0]))
        w.grad = np.array([0.5, -0.5])
        params.step()
        assert w.data[0] < 1.0 and w.data[1] > -1.0
        assert params.optimizer.step == 1
        assert w.grad is None

    def test_adam_first_step_size_is_lr(self):
        params = NetworkParams(np.float64)
        params.optimizer.lr = 0.01
        w = params.add("w", np.zeros(3))
        w.grad = np.array([2.0, -3.0, 0.1])
        params.step()
        np.testing.assert_allclose(np.abs(w.data), 0.01, rtol=1e-4)

    def test_zero_gradient_is_fixed_point_after_moves(self):
        state = AdamState()
        w = np.array([1.0, 2.0])
        adam_step({"w": w}, {"w": np.array([1.0, 1.0])}, state)
        np.testing.assert_allclose(w, [0.999, 1.999])
        moved, m_before = w.copy(), state.m["w"].copy()
        adam_step({"w": w}, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(w, moved)
        np.testing.assert_array_equal(state.m["w"], m_before)
        assert state.step == 1

    def test_missing_gradient_leaves_parameter_alone(self):
        state = AdamState()
        a, b = np.array([1.0]), np.array([5.0])
        adam_step({"a": a, "b": b}, {"a": np.array([1.0]), "b": np.array([1.0])}, state)
        b_after, v_before = b.copy(), state.v["b"].copy()
        adam_step({"a": a, "b": b}, {"a": np.array([1.0])}, state)
        np.testing.assert_array_equal(b, b_after)
        np.testing.assert_array_equal(state.v["b"], v_before)
        assert a[0] < 1.0 - 0.0015

    def test_duplicate_name_rejected(self):
        params = NetworkParams()
        params.add("w", np.zeros(2))
        with pytest.raises(ConfigurationError):
            params.add("w", np.zeros(2))

    def test_digest_tracks_values(self):
        params = NetworkParams()
        w = params.add("w", np.zeros(4))
        before = params.digest()
        assert params.digest() == before
        w.data[0] = 1.0
        assert params.digest() != before

    def test_arrays_load_roundtrip(self):
        a, b = NetworkParams(), NetworkParams()
        a.add("w", np.arange(6, dtype=np.float32).reshape(2, 3))
        a.add_batchnorm("bn", 3, 1e-5, 0.1)
        b.add("w", np.zeros((2, 3)))
        b.add_batchnorm("bn", 3, 1e-5, 0.1)
        b.load_arrays(a.arrays())
        assert a.digest() == b.digest()
