import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from minikd import autodiff as ad
from minikd.autodiff import ShapeError, Tape, Tensor
from minikd.gradcheck import grad_check


def naive_conv(x, k, b, stride=1, padding=0):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for y in range(ho):
                for x_ in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[i, ic, y * stride + dy, x_ * stride + dx] * k[oc, ic, dy, dx]
                    out[i, oc, y, x_] = acc
    return out


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestConv2d:
    def test_all_ones_3x3(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_output_shape(self):
        out = ad.conv2d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((4, 2, 3, 3))), Tensor(np.zeros(4)))
        assert out.shape == (1, 4, 6, 6)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2)])
    def test_matches_nested_loops(self, rng, stride, padding):
        x = rng.normal(size=(1, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        got = ad.conv2d(t64(x), t64(k), t64(b), stride, padding).data
        np.testing.assert_allclose(got, naive_conv(x, k, b, stride, padding), atol=1e-5)

    def test_float32_matches_nested_loops(self, rng):
        x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
        k = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(k), Tensor(b)).data, naive_conv(x, k, b), atol=1e-5)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(ShapeError, match="axis 1"):
            ad.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.zeros(2)))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError, match="height"):
            ad.conv2d(Tensor(np.zeros((1, 1, 2, 5))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)))

    def test_1x1_conv_is_per_pixel_dense(self, rng):
        x = rng.normal(size=(2, 4, 3, 3))
        k = rng.normal(size=(5, 4, 1, 1))
        b = rng.normal(size=5)
        conv = ad.conv2d(t64(x), t64(k), t64(b)).data
        pixels = x.transpose(0, 2, 3, 1).reshape(-1, 4)
        dense = ad.dense(t64(pixels), t64(k[:, :, 0, 0].T), t64(b)).data
        np.testing.assert_allclose(conv.transpose(0, 2, 3, 1).reshape(-1, 5), dense, atol=1e-5)


class TestDepthwise:
    def test_single_channel_equals_conv2d(self, rng):
        x = rng.normal(size=(2, 1, 6, 6))
        k = rng.normal(size=(1, 1, 3, 3))
        b = rng.normal(size=1)
        np.testing.assert_allclose(
            ad.depthwise_conv2d(t64(x), t64(k), t64(b)).data, ad.conv2d(t64(x), t64(k), t64(b)).data, atol=1e-12
        )

    def test_output_shape(self):
        out = ad.depthwise_conv2d(Tensor(np.zeros((1, 8, 6, 6))), Tensor(np.zeros((8, 1, 3, 3))), Tensor(np.zeros(8)))
        assert out.shape == (1, 8, 4, 4)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
    def test_matches_per_channel_oracle(self, rng, stride, padding):
        x = rng.normal(size=(2, 3, 7, 7))
        k = rng.normal(size=(3, 1, 3, 3))
        b = rng.normal(size=3)
        got = ad.depthwise_conv2d(t64(x), t64(k), t64(b), stride, padding).data
        for c in range(3):
            ref = naive_conv(x[:, c : c + 1], k[c : c + 1], b[c : c + 1], stride, padding)
            np.testing.assert_allclose(got[:, c : c + 1], ref, atol=1e-5)

    def test_kernel_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.depthwise_conv2d(Tensor(np.zeros((1, 4, 6, 6))), Tensor(np.zeros((3, 1, 3, 3))), Tensor(np.zeros(3)))


class TestDense:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(ad.dense(t64(x), t64(np.eye(4)), t64(np.zeros(4))).data, x)

    def test_hand_arithmetic(self):
        out = ad.dense(t64([[1, 2]]), t64(3 * np.eye(2)), t64([1, 1]))
        np.testing.assert_array_equal(out.data, [[4, 7]])

    def test_matches_triple_loop(self, rng):
        x = rng.normal(size=(4, 10))
        w = rng.normal(size=(10, 5))
        b = rng.normal(size=5)
        ref = np.zeros((4, 5))
        for i in range(4):
            for j in range(5):
                ref[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(10))
        np.testing.assert_allclose(ad.dense(t64(x), t64(w), t64(b)).data, ref, atol=1e-5)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            ad.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


class TestPlumbingOps:
    def test_concat_scaled_feature_map(self):
        a = Tensor(np.ones((1, 8, 10, 10)))
        b = Tensor(np.zeros((1, 8, 10, 10)))
        out = ad.concat_channels(a, b)
        assert out.shape == (1, 16, 10, 10)
        assert np.all(out.data[:, :8] == 1) and np.all(out.data[:, 8:] == 0)

    def test_concat_then_slice_recovers_inputs(self, rng):
        a = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        b = rng.normal(size=(2, 5, 4, 4)).astype(np.float32)
        out = ad.concat_channels(Tensor(a), Tensor(b)).data
        np.testing.assert_array_equal(out[:, :3], a)
        np.testing.assert_array_equal(out[:, 3:], b)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError, match="axis 2"):
            ad.concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 4))))

    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_max_pool(self):
        out = ad.max_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 4.0

    def test_max_pool_tie_routes_to_first(self):
        x = Tensor(np.array([[[[5.0, 5.0], [5.0, 1.0]]]]), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.max_pool2d(x, 2, 2))
        ad.backward(tape, loss)
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_global_avg_pool_and_flatten(self, rng):
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(ad.global_avg_pool2d(Tensor(x)).data, x.mean(axis=(2, 3)), rtol=1e-6)
        assert ad.flatten(Tensor(x)).shape == (2, 48)


class TestDropout:
    def test_inference_is_identity(self, rng):
        x = rng.normal(size=(4, 5)).astype(np.float32)
        np.testing.assert_array_equal(ad.dropout(Tensor(x), 0.5, training=False).data, x)

    def test_rate_zero_is_identity(self, rng):
        x = rng.normal(size=(4, 5)).astype(np.float32)
        out = ad.dropout(Tensor(x), 0.0, training=True, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(out.data, x)

    def test_large_sample_statistics(self):
        x = np.ones(100_000, dtype=np.float32) * 0.7
        out = ad.dropout(Tensor(x), 0.5, training=True, rng=np.random.default_rng(3)).data
        assert abs(np.mean(out != 0) - 0.5) < 0.01
        assert abs(out.mean() - x.mean()) / x.mean() < 0.02

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            ad.dropout(Tensor(np.ones(3)), 1.0, training=True, rng=np.random.default_rng(0))


class TestLogSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.log_softmax(t64([[0, 0]])).data, [[np.log(0.5)] * 2])

    def test_large_logit_stays_finite(self):
        out = ad.log_softmax(Tensor(np.array([[1000.0, 0.0]])))
        assert np.all(np.isfinite(out.data))

    def test_derived_value(self):
        np.testing.assert_allclose(ad.log_softmax(t64([[2, 0]])).data, [[-0.1269, -2.1269]], atol=1e-4)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-1e4, 1e4)))
    def test_rows_exponentiate_to_one(self, x):
        out = ad.log_softmax(t64(x)).data
        np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-6)


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = t64(rng.normal(size=(2, 3, 4)), grad=True)
        with Tape() as tape:
            loss = ad.sum_all(x)
        ad.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_sum_of_squares(self):
        x = t64([1.0, 2.0], grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(x, x))
        ad.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = t64([1.0, 2.0], grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ShapeError):
            ad.backward(tape, y)

    def test_frozen_tensors_get_no_gradient_storage(self, rng):
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        frozen = Tensor(rng.normal(size=(3, 2)), requires_grad=False)
        x = Tensor(rng.normal(size=(4, 3)))
        with Tape() as tape:
            a = ad.dense(x, frozen, Tensor(np.zeros(2)))
            b = ad.dense(x, w, Tensor(np.zeros(2)))
            loss = ad.sum_all(ad.add(a, b))
        grads = ad.backward(tape, loss)
        assert frozen.grad is None and w.grad is not None
        assert all(t is not frozen for t in grads)

    def test_ops_on_frozen_inputs_are_not_recorded(self, rng):
        with Tape() as tape:
            ad.relu(Tensor(rng.normal(size=5)))
        assert len(tape) == 0

    def test_composite_network_gradcheck(self, rng):
        x = rng.normal(size=(2, 1, 5, 5))
        k = rng.normal(size=(2, 1, 3, 3))
        b = np.full(2, 0.05)
        w = rng.normal(size=(18, 2))
        bd = rng.normal(size=2)

        def net(x_, k_, b_, w_, bd_):
            h = ad.relu(ad.conv2d(x_, k_, b_))
            return ad.scale(ad.sum_all(ad.pick(ad.log_softmax(ad.dense(ad.flatten(h), w_, bd_)), [0, 1])), -0.5)

        pre = ad.conv2d(t64(x), t64(k), t64(b)).data
        assert np.all(np.abs(pre) > 1e-3)
        rep = grad_check(net, (x, k, b, w, bd), epsilon=1e-6, tolerance=1e-5, name="net")
        assert rep.passed, rep.line()


class TestGradCheck:
    def test_dense_eps_1e3(self, rng):
        w_out = rng.normal(size=(3, 4))
        rep = grad_check(
            lambda x, w, b: ad.sum_all(ad.mul(ad.dense(x, w, b), t64(w_out))),
            (rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)),
            epsilon=1e-3,
            tolerance=1e-6,
            name="dense",
        )
        assert rep.passed and rep.max_rel_error < 1e-6

    def test_conv2d_eps_1e3(self, rng):
        w_out = rng.normal(size=(1, 2, 3, 3))
        rep = grad_check(
            lambda x, k, b: ad.sum_all(ad.mul(ad.conv2d(x, k, b), t64(w_out))),
            (rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)),
            epsilon=1e-3,
            tolerance=1e-6,
            name="conv2d",
        )
        assert rep.max_rel_error < 1e-6

    def test_relu_away_from_kink(self, rng):
        x = rng.normal(size=20)
        x = np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.2, x)
        wts = rng.normal(size=20)
        rep = grad_check(lambda x_: ad.sum_all(ad.mul(ad.relu(x_), t64(wts))), (x,), epsilon=1e-3, tolerance=1e-6)
        assert rep.passed

    def test_pass_flag_tracks_tolerance(self):
        from minikd.gradcheck import GradCheckReport

        assert GradCheckReport("op", 1e-6, 1e-5).passed
        assert not GradCheckReport("op", 2e-5, 1e-5).passed

    def test_float32_mode_within_1e3(self, rng):
        wts = rng.normal(size=(3, 4)).astype(np.float32)
        rep = grad_check(
            lambda x: ad.sum_all(ad.mul(ad.log_softmax(x), Tensor(wts))),
            (rng.normal(size=(3, 4)),),
            epsilon=1e-2,
            tolerance=1e-3,
            dtype=np.float32,
        )
        assert rep.passed, rep.line()
