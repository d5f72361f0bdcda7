import numpy as np
import pytest

from uwbrem.nn import (
    AdamState,
    ConvKernel,
    DenseLayer,
    ShapeError,
    adam_step,
    conv1d_same,
    conv1d_same_backward,
    conv_out_length,
    dense_backward,
    dense_forward,
    mae_loss,
    relu,
    same_padding,
)


def _kernel(k, cin, cout, stride=1, activation="none", bias=True, seed=0,
            dtype=np.float64):
    rng = np.random.default_rng(seed)
    return ConvKernel(k, cin, cout,
                      rng.normal(size=(k, cin, cout)).astype(dtype),
                      rng.normal(size=cout).astype(dtype) if bias else None,
                      stride=stride, activation=activation)


def conv_oracle(x, kernel):
    """Explicit per-output-position dot products with the same 'same' padding."""
    B, L, _ = x.shape
    k, s = kernel.kernel_size, kernel.stride
    left, right = same_padding(L, k, s)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    out_len = conv_out_length(L, s)
    y = np.zeros((B, out_len, kernel.out_channels))
    for b in range(B):
        for t in range(out_len):
            window = xp[b, t * s:t * s + k, :]
            for c in range(kernel.out_channels):
                y[b, t, c] = np.sum(window * kernel.weights[:, :, c])
                if kernel.bias is not None:
                    y[b, t, c] += kernel.bias[c]
    if kernel.activation == "relu":
        y = np.maximum(y, 0.0)
    return y


class TestConv:
    def test_length_chain_157(self):
        lengths = [157]
        for _ in range(3):
            lengths.append(conv_out_length(lengths[-1], 2))
        assert lengths[1:] == [79, 40, 20]

    def test_length_invariant_full_range(self):
        for L in range(1, 513):
            x = np.zeros((1, L, 1))
            assert conv1d_same(x, _kernel(3, 1, 1)).shape[1] == L
            assert conv1d_same(x, _kernel(3, 1, 1, stride=2)).shape[1] == -(-L // 2)

    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(2, 9, 1))
        ident = ConvKernel(1, 1, 1, np.ones((1, 1, 1)), np.zeros(1))
        assert np.allclose(conv1d_same(x, ident), x)

    @pytest.mark.parametrize("k,s,cin,cout", [(3, 1, 1, 1), (3, 2, 2, 4),
                                              (5, 1, 3, 2), (4, 2, 1, 1),
                                              (6, 1, 1, 16)])
    def test_matches_sliding_window_oracle(self, k, s, cin, cout):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 5, cin))
        kernel = _kernel(k, cin, cout, stride=s, activation="relu", seed=2)
        assert np.allclose(conv1d_same(x, kernel), conv_oracle(x, kernel))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            conv1d_same(np.zeros((4, 5)), _kernel(3, 1, 1))
        with pytest.raises(ShapeError):
            conv1d_same(np.zeros((1, 5, 2)), _kernel(3, 1, 1))

    def test_padding_convention_extra_on_right(self):
        # even kernel: total padding is odd, the extra element goes right
        assert same_padding(4, 4, 1) == (1, 2)
        assert same_padding(5, 3, 1) == (1, 1)


class TestDense:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        layer = DenseLayer(4, 4, np.eye(4), np.zeros(4))
        assert np.allclose(dense_forward(x, layer), x)

    def test_zero_input_gives_bias(self):
        layer = DenseLayer(4, 2, np.ones((4, 2)), np.array([1.5, -2.0]))
        assert np.allclose(dense_forward(np.zeros((1, 4)), layer), [[1.5, -2.0]])

    def test_random_8_to_1_dot_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 8))
        layer = DenseLayer(8, 1, rng.normal(size=(8, 1)), rng.normal(size=1))
        expected = sum(x[0, i] * layer.weights[i, 0] for i in range(8)) + layer.bias[0]
        assert np.allclose(dense_forward(x, layer), [[expected]])


class TestBackward:
    def test_conv_gradients_finite_difference(self):
        from conftest import finite_diff
        rng = np.random.default_rng(4)
        for stride, k, act in [(1, 3, "none"), (2, 3, "relu"), (2, 4, "relu")]:
            kernel = _kernel(k, 2, 3, stride=stride, activation=act, seed=5)
            x = rng.normal(size=(2, 7, 2))
            dy_seed = rng.normal(size=(2, conv_out_length(7, stride), 3))

            def loss():
                return float(np.sum(conv1d_same(x, kernel) * dy_seed))

            _, cache = conv1d_same(x, kernel, return_cache=True)
            dx, dW, db = conv1d_same_backward(dy_seed, kernel, cache)
            params = {"w": kernel.weights, "b": kernel.bias}
            grads = {"w": dW, "b": db}
            assert finite_diff(loss, params, grads) < 1e-4
            # input gradient via the same oracle
            assert finite_diff(loss, {"x": x}, {"x": dx}) < 1e-4

    def test_dense_gradients_finite_difference(self):
        from conftest import finite_diff
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 5))
        layer = DenseLayer(5, 2, rng.normal(size=(5, 2)), rng.normal(size=2))
        dy_seed = rng.normal(size=(4, 2))

        def loss():
            return float(np.sum(dense_forward(x, layer) * dy_seed))

        _, cache = dense_forward(x, layer, return_cache=True)
        dx, dW, db = dense_backward(dy_seed, layer, cache)
        assert finite_diff(loss, {"w": layer.weights, "b": layer.bias, "x": x},
                           {"w": dW, "b": db, "x": dx}) < 1e-4

    def test_backward_linear_in_upstream(self):
        rng = np.random.default_rng(7)
        kernel = _kernel(3, 1, 2, seed=8)
        x = rng.normal(size=(1, 6, 1))
        _, cache = conv1d_same(x, kernel, return_cache=True)
        dy = rng.normal(size=(1, 6, 2))
        dx1, dW1, db1 = conv1d_same_backward(dy, kernel, cache)
        dx2, dW2, db2 = conv1d_same_backward(2 * dy, kernel, cache)
        assert np.allclose(dx2, 2 * dx1)
        assert np.allclose(dW2, 2 * dW1)
        assert np.allclose(db2, 2 * db1)


class TestLossAndActivations:
    def test_relu(self):
        x = np.array([-1.0, 0.0, 2.0])
        assert np.array_equal(relu(x), [0.0, 0.0, 2.0])
        assert np.array_equal(relu(relu(x)), relu(x))

    def test_mae_loss_value_and_grad(self):
        loss, grad = mae_loss(np.array([1.0, -1.0]), np.array([0.0, 0.0]))
        assert loss == 1.0
        assert np.array_equal(grad, [0.5, -0.5])

    def test_mae_subgradient_at_zero(self):
        loss, grad = mae_loss(np.array([0.0, 0.0]), np.array([0.0, 0.0]))
        assert loss == 0.0
        assert np.array_equal(grad, [0.0, 0.0])


class TestAdam:
    def test_first_step_magnitude(self):
        p = {"w": np.array([1.0])}
        state = AdamState(lr=0.1)
        adam_step(p, {"w": np.array([4.0])}, state)
        # bias correction makes m_hat=g, v_hat=g^2: step ~ lr
        assert abs((1.0 - p["w"][0]) - 0.1) < 1e-6

    def test_zero_gradient_is_noop(self):
        p = {"w": np.array([2.0, -3.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
        assert np.array_equal(p["w"], [2.0, -3.0])

    def test_three_step_scalar_trace(self):
        # hand-rolled scalar reference for g = 1, 1, 1, lr = 0.1
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        w_ref, m, v = 1.0, 0.0, 0.0
        for t in range(1, 4):
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            w_ref -= lr * m_hat / (np.sqrt(v_hat) + eps)

        p = {"w": np.array([1.0])}
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
        for _ in range(3):
            adam_step(p, {"w": np.array([1.0])}, state)
        assert abs(p["w"][0] - w_ref) < 1e-12
