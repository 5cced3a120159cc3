import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tactnet import tensor_core as tc

from conftest import numeric_grad, rel_error


def naive_conv(x, w, b, stride, padding):
    n, h, wd, cin = x.shape
    f, _, _, cout = w.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-wd // stride)
        th = max((ho - 1) * stride + f - h, 0)
        tw = max((wo - 1) * stride + f - wd, 0)
        top, left = th // 2, tw // 2
    else:
        ho, wo = (h - f) // stride + 1, (wd - f) // stride + 1
        top = left = 0
    out = np.zeros((n, ho, wo, cout))
    for s in range(n):
        for o in range(ho):
            for p in range(wo):
                for k in range(cout):
                    acc = b[k]
                    for i in range(f):
                        for j in range(f):
                            r, c = o * stride + i - top, p * stride + j - left
                            if 0 <= r < h and 0 <= c < wd:
                                acc += np.dot(x[s, r, c, :], w[i, j, :, k])
                    out[s, o, p, k] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 4, 5, 1))
        out, _ = tc.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out, x)

    def test_sum_of_entries(self):
        x = np.arange(1.0, 10.0).reshape(1, 3, 3, 1)
        out, _ = tc.conv2d(x, np.ones((3, 3, 1, 1)), np.zeros(1), padding="valid")
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 45.0

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid")])
    def test_matches_naive_loop(self, rng, stride, padding):
        x = rng.normal(size=(1, 5, 7, 2))
        w = rng.normal(size=(3, 3, 2, 2))
        b = rng.normal(size=2)
        out, _ = tc.conv2d(x, w, b, stride, padding)
        ref = naive_conv(x, w, b, stride, padding)
        np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-12)

    def test_same_padding_extent(self, rng):
        out, _ = tc.conv2d(rng.normal(size=(1, 7, 13, 1)), rng.normal(size=(3, 3, 1, 4)), np.zeros(4), stride=2)
        assert out.shape == (1, 4, 7, 4)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(tc.ShapeError, match="channels"):
            tc.conv2d(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 2, 1)), np.zeros(1))

    def test_even_filter_rejected(self):
        with pytest.raises(tc.ShapeError, match="odd"):
            tc.conv2d(np.zeros((1, 4, 4, 1)), np.zeros((2, 2, 1, 1)), np.zeros(1))

    @pytest.mark.parametrize("f,stride", [(1, 2), (3, 1), (3, 2), (5, 1)])
    def test_gradients(self, rng, f, stride):
        x = rng.normal(size=(2, 5, 6, 2))
        w = rng.normal(size=(f, f, 2, 3))
        b = rng.normal(size=3)
        out, cache = tc.conv2d(x, w, b, stride)
        r = rng.normal(size=out.shape)
        dx, dw, db = tc.conv2d_backward(r, cache)
        loss = lambda: float(np.sum(tc.conv2d(x, w, b, stride)[0] * r))
        assert rel_error(dx, numeric_grad(loss, x)) < 1e-4
        assert rel_error(dw, numeric_grad(loss, w)) < 1e-4
        assert rel_error(db, numeric_grad(loss, b)) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), c=st.floats(-3, 3), seed=st.integers(0, 2**16))
    def test_linear_in_input(self, a, c, seed):
        g = np.random.default_rng(seed)
        x, y = g.normal(size=(2, 2, 6, 5, 2))
        w = g.normal(size=(3, 3, 2, 3))
        b = np.zeros(3)
        lhs = tc.conv2d(a * x + c * y, w, b)[0]
        rhs = a * tc.conv2d(x, w, b)[0] + c * tc.conv2d(y, w, b)[0]
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)


class TestBatchnorm:
    def _params(self, c, dtype=np.float64):
        return np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype)

    def test_already_normalized_passthrough(self):
        x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(4, 1, 1, 1)
        out, _ = tc.batchnorm(x, *self._params(1))
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-4), rtol=1e-12)
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_constant_channel_gives_beta(self):
        gamma, beta, rm, rv = self._params(2)
        beta[:] = [0.25, -0.5]
        x = np.full((3, 2, 2, 2), 7.0)
        out, _ = tc.batchnorm(x, gamma, beta, rm, rv)
        np.testing.assert_allclose(out[..., 0], 0.25)
        np.testing.assert_allclose(out[..., 1], -0.5)

    def test_moments_of_random_batch(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 3, 3, 2))
        out, _ = tc.batchnorm(x, *self._params(2))
        flat = out.reshape(-1, 2)
        assert np.all(np.abs(flat.mean(axis=0)) < 1e-6)
        var = flat.var(axis=0)
        assert np.all((var >= 1 - 1e-3) & (var <= 1))

    def test_running_stats_momentum(self, rng):
        x = rng.normal(1.0, 3.0, size=(5, 2, 2, 1))
        gamma, beta, rm, rv = self._params(1)
        tc.batchnorm(x, gamma, beta, rm, rv)
        np.testing.assert_allclose(rm, 0.1 * x.mean())
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var())

    def test_infer_uses_running_stats(self):
        gamma, beta, rm, rv = self._params(1)
        rm[:] = 2.0
        rv[:] = 4.0
        out, _ = tc.batchnorm(np.full((1, 1, 1, 1), 4.0), gamma, beta, rm, rv, mode="infer")
        np.testing.assert_allclose(out, 2.0 / np.sqrt(4.0 + 1e-4))

    def test_train_batch_of_one_rejected(self):
        with pytest.raises(tc.ShapeError, match="at least 2"):
            tc.batchnorm(np.zeros((1, 2, 2, 1)), *self._params(1))

    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_gradients(self, rng, mode):
        x = rng.normal(size=(3, 2, 3, 2))
        gamma = rng.normal(size=2)
        beta = rng.normal(size=2)
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)

        def run():
            return tc.batchnorm(x, gamma, beta, rm.copy(), rv.copy(), mode)

        out, cache = run()
        r = rng.normal(size=out.shape)
        dx, dg, dbt = tc.batchnorm_backward(r, cache)
        loss = lambda: float(np.sum(run()[0] * r))
        assert rel_error(dx, numeric_grad(loss, x)) < 1e-4
        if mode == "train":
            assert rel_error(dg, numeric_grad(loss, gamma)) < 1e-4
            assert rel_error(dbt, numeric_grad(loss, beta)) < 1e-4


class TestPoolReluDense:
    def test_relu(self):
        out, _ = tc.relu(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out, [0, 0, 2])

    def test_pool_2x2(self):
        out, _ = tc.maxpool2d(np.array([[1.0, 2], [3, 4]]).reshape(1, 2, 2, 1))
        assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 4

    def test_pool_ceil_extents(self):
        out, _ = tc.maxpool2d(np.zeros((1, 7, 13, 3)))
        assert out.shape == (1, 4, 7, 3)

    def test_pool_ragged_window_sees_real_cells(self):
        x = -np.arange(9.0).reshape(1, 3, 3, 1) - 1
        out, _ = tc.maxpool2d(x)
        np.testing.assert_array_equal(out[0, :, :, 0], [[-1, -3], [-7, -9]])

    def test_pool_tie_goes_to_first(self):
        x = np.ones((1, 2, 2, 1))
        out, cache = tc.maxpool2d(x)
        dx = tc.maxpool2d_backward(np.ones_like(out), cache)
        np.testing.assert_array_equal(dx[0, :, :, 0], [[1, 0], [0, 0]])

    def test_pool_empty_rejected(self):
        with pytest.raises(tc.ShapeError):
            tc.maxpool2d(np.zeros((1, 0, 4, 1)))

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 2**16))
    def test_pool_backward_conserves_mass(self, h, w, seed):
        g = np.random.default_rng(seed)
        out, cache = tc.maxpool2d(g.normal(size=(2, h, w, 3)))
        dout = g.normal(size=out.shape)
        dx = tc.maxpool2d_backward(dout, cache)
        assert dx.shape == (2, h, w, 3)
        np.testing.assert_allclose(dx.sum(), dout.sum(), atol=1e-10)

    def test_pool_and_relu_gradients(self, rng):
        x = rng.normal(size=(2, 5, 7, 2))
        out, cache = tc.maxpool2d(x)
        r = rng.normal(size=out.shape)
        loss = lambda: float(np.sum(tc.maxpool2d(x)[0] * r))
        assert rel_error(tc.maxpool2d_backward(r, cache), numeric_grad(loss, x)) < 1e-4
        out, mask = tc.relu(x)
        r = rng.normal(size=x.shape)
        loss = lambda: float(np.sum(tc.relu(x)[0] * r))
        assert rel_error(tc.relu_backward(r, mask), numeric_grad(loss, x)) < 1e-4

    def test_dense_gradients_and_linearity(self, rng):
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(6, 3))
        b = rng.normal(size=3)
        out, cache = tc.fully_connected(x, w, b)
        r = rng.normal(size=out.shape)
        dx, dw, db = tc.fully_connected_backward(r, cache, w)
        loss = lambda: float(np.sum(tc.fully_connected(x, w, b)[0] * r))
        for a, p in [(dx, x), (dw, w), (db, b)]:
            assert rel_error(a, numeric_grad(loss, p)) < 1e-4
        y = rng.normal(size=x.shape)
        z = np.zeros(3)
        np.testing.assert_allclose(tc.fully_connected(2 * x - 3 * y, w, z)[0],
                                   2 * tc.fully_connected(x, w, z)[0] - 3 * tc.fully_connected(y, w, z)[0],
                                   atol=1e-5)

    def test_dense_mismatch_rejected(self):
        with pytest.raises(tc.ShapeError):
            tc.fully_connected(np.zeros((2, 5)), np.zeros((4, 3)), np.zeros(3))


class TestSoftmaxCrossEntropy:
    def test_equal_logits(self):
        _, _, p = tc.softmax_cross_entropy(np.zeros((2, 22)), [0, 5])
        np.testing.assert_allclose(p, 1 / 22)

    def test_closed_form(self):
        _, _, p = tc.softmax_cross_entropy(np.array([[0.0, np.log(2)]]), [1])
        np.testing.assert_allclose(p, [[1 / 3, 2 / 3]], rtol=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        logits = rng.normal(size=(3, 5))
        labels = np.array([4, 0, 2])
        loss, grad, _ = tc.softmax_cross_entropy(logits, labels)
        num = numeric_grad(lambda: tc.softmax_cross_entropy(logits, labels)[0], logits)
        assert rel_error(grad, num) < 1e-6

    def test_stable_for_huge_logits(self):
        loss, grad, p = tc.softmax_cross_entropy(np.array([[1e4, 0.0, -1e4]]), [0])
        assert np.isfinite(loss) and np.all(np.isfinite(grad))
        assert loss < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16), k=st.integers(2, 30))
    def test_rows_sum_to_one(self, seed, k):
        g = np.random.default_rng(seed)
        _, _, p = tc.softmax_cross_entropy(g.normal(scale=10, size=(4, k)), g.integers(0, k, 4))
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            tc.softmax_cross_entropy(np.zeros((1, 22)), [22])


class TestSgd:
    def test_plain_step(self):
        p = {"w": np.array([1.0, 2.0])}
        tc.sgd_step(p, {"w": np.array([0.5, -1.0])}, {}, lr=0.1, momentum=0.0)
        np.testing.assert_allclose(p["w"], [0.95, 2.1])

    def test_zero_grad_is_noop(self):
        p = {"w": np.array([3.0])}
        tc.sgd_step(p, {"w": np.array([0.0])}, {}, lr=0.1)
        assert p["w"][0] == 3.0

    def test_two_momentum_steps_unrolled(self):
        p0, lr, m, wd = 1.0, 0.1, 0.9, 0.01
        g1, g2 = 0.5, -0.2
        p = {"w": np.array([p0])}
        vel = {}
        tc.sgd_step(p, {"w": np.array([g1])}, vel, lr, m, wd)
        p1 = p["w"][0]
        tc.sgd_step(p, {"w": np.array([g2])}, vel, lr, m, wd)
        v1 = -lr * (g1 + wd * p0)
        v2 = m * v1 - lr * (g2 + wd * (p0 + v1))
        assert p1 == pytest.approx(p0 + v1, abs=1e-15)
        assert p["w"][0] == pytest.approx(p0 + v1 + v2, abs=1e-15)

    def test_non_finite_gradient_aborts(self):
        with pytest.raises(tc.NonFiniteError, match="w"):
            tc.sgd_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, {}, lr=0.1)

    def test_determinism(self, rng):
        g = {"w": rng.normal(size=5)}
        runs = []
        for _ in range(2):
            p = {"w": np.ones(5)}
            vel = {}
            for _ in range(3):
                tc.sgd_step(p, g, vel, lr=0.05)
            runs.append(p["w"].tobytes())
        assert runs[0] == runs[1]
