import math

import numpy as np
import pytest

from ruladapt.layers import (
    DenseParams,
    DenseStack,
    LstmParams,
    LstmStack,
    ShapeError,
    dense_backward,
    dense_forward,
    dropout,
    grad_check,
    grl_backward,
    grl_forward,
    init_dense,
    init_lstm,
    lstm_backward,
    lstm_forward,
)


def zero_lstm(h, q):
    z = lambda *s: np.zeros(s)
    return LstmParams(z(h, q), z(h, q), z(h, q), z(h, q),
                      z(h, h), z(h, h), z(h, h), z(h, h),
                      z(h), z(h), z(h), z(h))


def scalar_lstm_oracle(p: LstmParams, x):
    """Step-by-step scalar-loop evaluation of the gate equations."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    h_dim, q = p.W_f.shape
    h_prev = [0.0] * h_dim
    c_prev = [0.0] * h_dim
    for t in range(x.shape[0]):
        h_new, c_new = [0.0] * h_dim, [0.0] * h_dim
        for j in range(h_dim):
            zf = sum(p.W_f[j, k] * x[t, k] for k in range(q))
            zi = sum(p.W_i[j, k] * x[t, k] for k in range(q))
            zo = sum(p.W_o[j, k] * x[t, k] for k in range(q))
            zc = sum(p.W_C[j, k] * x[t, k] for k in range(q))
            zf += sum(p.R_f[j, k] * h_prev[k] for k in range(h_dim)) + p.b_f[j]
            zi += sum(p.R_i[j, k] * h_prev[k] for k in range(h_dim)) + p.b_i[j]
            zo += sum(p.R_o[j, k] * h_prev[k] for k in range(h_dim)) + p.b_o[j]
            zc += sum(p.R_C[j, k] * h_prev[k] for k in range(h_dim)) + p.b_C[j]
            f, i, o = sig(zf), sig(zi), sig(zo)
            c_new[j] = f * c_prev[j] + i * math.tanh(zc)
            h_new[j] = o * math.tanh(c_new[j])
        h_prev, c_prev = h_new, c_new
    return np.array(h_prev)


class TestLstmForward:
    def test_all_zero_parameters(self):
        p = zero_lstm(3, 2)
        h, cache = lstm_forward(p, np.ones((4, 2)))
        assert np.array_equal(h, np.zeros(3))
        # every sigmoid gate is 0.5 and the candidate is 0 at zero pre-activations
        assert np.allclose(cache.gates[..., :9], 0.5)
        assert np.allclose(cache.gates[..., 9:], 0.0)

    def test_hand_evaluated_single_step(self):
        # open input and output gates via large biases; h1 = tanh(tanh(b_C))
        p = zero_lstm(1, 1)
        p.b_i[0] = 50.0
        p.b_o[0] = 50.0
        p.b_C[0] = 0.7
        h, _ = lstm_forward(p, np.zeros((1, 1)))
        assert abs(h[0] - math.tanh(math.tanh(0.7))) < 1e-12

    def test_matches_scalar_loop_oracle(self, rng):
        p = init_lstm(2, 2, rng)
        for arr in p.arrays():
            arr += 0.1 * rng.standard_normal(arr.shape)
        x = rng.standard_normal((3, 2))
        h, _ = lstm_forward(p, x)
        assert np.max(np.abs(h - scalar_lstm_oracle(p, x))) < 1e-12

    def test_shape_mismatch(self, rng):
        p = init_lstm(2, 3, rng)
        with pytest.raises(ShapeError):
            lstm_forward(p, np.ones((4, 5)))

    def test_batch_consistent_with_single(self, rng):
        p = init_lstm(3, 2, rng)
        xs = rng.standard_normal((4, 5, 2))
        h_batch, _ = lstm_forward(p, xs)
        for row in range(4):
            h_one, _ = lstm_forward(p, xs[row])
            assert np.allclose(h_batch[row], h_one, atol=1e-14)


class TestLstmBackward:
    def test_zero_upstream_gradient(self, rng):
        p = init_lstm(3, 2, rng)
        _, cache = lstm_forward(p, rng.standard_normal((4, 2)))
        grads, gx = lstm_backward(p, cache, grad_hT=np.zeros(3))
        assert all(np.all(g == 0) for g in grads.arrays())
        assert np.all(gx == 0)

    def test_finite_difference_agreement(self, rng):
        p = init_lstm(4, 3, rng)
        x = rng.standard_normal((2, 5, 3))
        g = rng.standard_normal((2, 4))

        def loss():
            h, _ = lstm_forward(p, x)
            return float(np.sum(h * g))

        def grads():
            h, cache = lstm_forward(p, x)
            gr, _ = lstm_backward(p, cache, grad_hT=g)
            return gr.arrays()

        assert grad_check(p.arrays(), loss, grads) < 1e-4

    def test_padded_zero_rows_give_finite_gradients(self, rng):
        p = init_lstm(3, 2, rng)
        x = np.vstack([np.zeros((4, 2)), rng.standard_normal((3, 2))])
        _, cache = lstm_forward(p, x)
        grads, gx = lstm_backward(p, cache, grad_hT=np.ones(3))
        assert all(np.all(np.isfinite(g)) for g in grads.arrays())
        assert np.all(np.isfinite(gx))

    def test_rejects_foreign_cache(self, rng):
        p1 = init_lstm(3, 2, rng)
        p2 = init_lstm(3, 2, rng)
        _, cache = lstm_forward(p1, rng.standard_normal((4, 2)))
        with pytest.raises(ShapeError):
            lstm_backward(p2, cache, grad_hT=np.zeros(3))


class TestDense:
    def test_identity_linear(self):
        p = DenseParams(np.eye(3), np.zeros(3), "linear")
        y, _ = dense_forward(p, np.array([1.0, -2.0, 3.0]))
        assert np.array_equal(y, [1.0, -2.0, 3.0])

    def test_relu_clips_negative(self):
        p = DenseParams(np.eye(2), np.zeros(2), "relu")
        y, _ = dense_forward(p, np.array([-1.0, 2.0]))
        assert np.array_equal(y, [0.0, 2.0])

    def test_sigmoid_at_zero(self):
        p = DenseParams(np.zeros((1, 2)), np.zeros(1), "sigmoid")
        y, _ = dense_forward(p, np.array([3.0, -4.0]))
        assert y[0] == 0.5

    def test_linear_identity_backward(self):
        p = DenseParams(np.eye(3), np.zeros(3), "linear")
        _, cache = dense_forward(p, np.array([1.0, 2.0, 3.0]))
        grad = np.array([0.5, -1.0, 2.0])
        _, gx = dense_backward(p, cache, grad)
        assert np.array_equal(gx, grad)

    @pytest.mark.parametrize("activation", ["relu", "sigmoid", "linear"])
    def test_finite_difference_agreement(self, rng, activation):
        p = init_dense(4, 3, activation, rng)
        x = rng.standard_normal((5, 3))
        g = rng.standard_normal((5, 4))

        def loss():
            y, _ = dense_forward(p, x)
            return float(np.sum(y * g))

        def grads():
            y, cache = dense_forward(p, x)
            gr, _ = dense_backward(p, cache, g)
            return gr.arrays()

        assert grad_check(p.arrays(), loss, grads) < 1e-4

    def test_relu_gradient_zero_at_exact_zero(self):
        p = DenseParams(np.eye(1), np.zeros(1), "relu")
        _, cache = dense_forward(p, np.array([0.0]))
        grads, gx = dense_backward(p, cache, np.array([5.0]))
        assert gx[0] == 0.0
        assert grads.W[0, 0] == 0.0


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        x = rng.standard_normal(10)
        y, mask = dropout(x, 0.0, "train", rng)
        assert np.array_equal(y, x)
        assert np.array_equal(mask, np.ones(10))

    def test_eval_mode_is_identity(self, rng):
        x = rng.standard_normal(10)
        y, _ = dropout(x, 0.9, "eval", rng)
        assert np.array_equal(y, x)

    def test_expectation_preserved(self):
        rng = np.random.default_rng(7)
        x = np.array([1.0, -2.0, 3.0])
        total = np.zeros(3)
        trials = 100_000
        for _ in range(trials):
            y, _ = dropout(x, 0.5, "train", rng)
            total += y
        assert np.max(np.abs(total / trials - x) / np.abs(x)) < 0.02

    def test_mask_reproducible_under_seed(self):
        x = np.ones(32)
        _, m1 = dropout(x, 0.5, "train", np.random.default_rng(42))
        _, m2 = dropout(x, 0.5, "train", np.random.default_rng(42))
        assert np.array_equal(m1, m2)

    def test_invalid_rate(self, rng):
        with pytest.raises(ValueError):
            dropout(np.ones(3), 1.0, "train", rng)
        with pytest.raises(ValueError):
            dropout(np.ones(3), -0.1, "train", rng)


class TestGradientReversal:
    def test_scales_and_flips(self):
        out = grl_backward(np.array([1.0, -2.0]), 0.8)
        assert np.allclose(out, [-0.8, 1.6])

    def test_alpha_zero(self):
        assert np.array_equal(grl_backward(np.array([3.0, -1.0]), 0.0), [0.0, 0.0])

    def test_forward_is_identity(self):
        x = np.array([1.0, 2.0])
        assert grl_forward(x) is x

    def test_feature_update_ascends_domain_loss(self, rng):
        # the reversed gradient must equal -alpha * dL/dtheta exactly, so an
        # SGD step moves the feature weights UP the domain-loss slope
        alpha = 0.8
        p = init_dense(1, 3, "linear", rng)
        x = rng.standard_normal((6, 3))
        d = np.array([0.0, 1.0, 0.0, 1.0, 1.0, 0.0])

        def bce():
            z, _ = dense_forward(p, x)
            prob = 1.0 / (1.0 + np.exp(-z[:, 0]))
            return float(np.mean(-(d * np.log(prob) + (1 - d) * np.log(1 - prob))))

        def reversed_grads():
            z, cache = dense_forward(p, x)
            prob = 1.0 / (1.0 + np.exp(-z[:, 0]))
            dz = ((prob - d) / len(d))[:, None]
            grads, _ = dense_backward(p, cache, dz)
            return [grl_backward(g, alpha) for g in grads.arrays()]

        def direct_grads():
            z, cache = dense_forward(p, x)
            prob = 1.0 / (1.0 + np.exp(-z[:, 0]))
            dz = ((prob - d) / len(d))[:, None]
            grads, _ = dense_backward(p, cache, dz)
            return grads.arrays()

        for rev, direct in zip(reversed_grads(), direct_grads()):
            assert np.allclose(rev, -alpha * direct, atol=1e-15)
        # finite-difference confirmation that direct grads are d(bce)/dtheta
        assert grad_check(p.arrays(), bce, direct_grads) < 1e-6


class TestGradCheckHarness:
    def test_linear_layer_squared_loss_is_exact(self, rng):
        w = rng.standard_normal((1, 4))
        x = rng.standard_normal(4)

        def loss():
            return float((w @ x)[0] ** 2)

        def grads():
            return [2.0 * (w @ x)[0] * x[None, :]]

        assert grad_check([w], loss, grads) < 1e-8

    def test_zero_parameter_fragment(self):
        assert grad_check([], lambda: 1.0, lambda: []) == 0.0

    def test_full_lstm_dense_stack(self, rng):
        lstm = LstmStack([init_lstm(4, 3, rng)], [0.0])
        head = DenseStack(
            [init_dense(3, 4, "relu", rng), init_dense(1, 3, "linear", rng)], [0.0, 0.0]
        )
        x = rng.standard_normal((2, 5, 3))
        target = rng.standard_normal(2)
        params = lstm.arrays() + head.arrays()

        def loss():
            h, _ = lstm.forward(x)
            y, _ = head.forward(h)
            return float(np.mean((y[:, 0] - target) ** 2))

        def grads():
            h, lc = lstm.forward(x)
            y, hc = head.forward(h)
            gy = (2.0 * (y[:, 0] - target) / len(target))[:, None]
            g_head, gh = head.backward(hc, gy)
            g_lstm, _ = lstm.backward(lc, gh)
            return g_lstm + g_head

        assert grad_check(params, loss, grads) < 1e-4
