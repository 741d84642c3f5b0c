"""Forward-op contracts: frozen examples and independent loop oracles."""

import numpy as np
import pytest

from cineclr.errors import ConfigurationError, InputDataError, UsageError
from cineclr.tensor import (
    Tape, Tensor, backward, conv2d, cosine_similarity, dense, global_avg_pool,
    pool2x2_avg, relu, softmax, softmax_cross_entropy, tensor_sum,
)


def conv_loop_oracle(x, k, b, stride=1, pad=0):
    """Direct quadruple-nested-loop convolution."""
    c_out, c_in, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (x.shape[1] + 2 * pad - kh) // stride + 1
    w_out = (x.shape[2] + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for co in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                window = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[co, i, j] = (window * k[co]).sum() + b[co]
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 3, 3)
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernel_annihilates(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 6, 6))
        out = conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(3)), pad=1)
        assert np.all(out.data == 0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        ref = conv_loop_oracle(x, k, b)
        np.testing.assert_allclose(out, ref, rtol=1e-6)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1)])
    def test_stride_pad_oracle(self, stride, pad):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 8, 8))
        k = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad).data
        np.testing.assert_allclose(out, conv_loop_oracle(x, k, b, stride, pad), rtol=1e-6)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))


class TestDense:
    def test_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        out = dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_constant(self):
        b = np.array([5.0, -1.0])
        out = dense(Tensor(np.ones(4)), Tensor(np.zeros((2, 4))), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_matvec_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=4)
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=3)
        out = dense(Tensor(x), Tensor(w), Tensor(b)).data
        ref = np.array([w[i] @ x + b[i] for i in range(3)])
        np.testing.assert_allclose(out, ref, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            dense(Tensor(np.zeros(5)), Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))


class TestRelu:
    def test_sign_cases(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_positive_identity(self):
        x = np.array([0.5, 1.0, 7.0])
        np.testing.assert_array_equal(relu(Tensor(x)).data, x)

    def test_gradient_mask(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(relu(x))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])


class TestPooling:
    def test_constant_preserved(self):
        x = np.full((2, 4, 4), 3.5)
        np.testing.assert_array_equal(pool2x2_avg(Tensor(x)).data, np.full((2, 2, 2), 3.5))

    def test_block_mean(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[None]
        assert pool2x2_avg(Tensor(x)).data[0, 0, 0] == 2.5

    def test_windowed_mean_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 4, 4))
        out = pool2x2_avg(Tensor(x)).data
        for i in range(2):
            for j in range(2):
                assert np.isclose(out[0, i, j], x[0, 2*i:2*i+2, 2*j:2*j+2].mean())

    def test_odd_extent_rejected(self):
        with pytest.raises(ConfigurationError):
            pool2x2_avg(Tensor(np.zeros((1, 5, 4))))

    def test_global_avg_pool(self):
        assert global_avg_pool(Tensor(np.full((3, 2, 2), 2.0))).data.tolist() == [2.0] * 3
        x = np.array([0.0, 0.0, 0.0, 4.0]).reshape(1, 2, 2)
        assert global_avg_pool(Tensor(x)).data[0] == 1.0
        rng = np.random.default_rng(5)
        y = rng.normal(size=(4, 6, 6))
        np.testing.assert_allclose(global_avg_pool(Tensor(y)).data, y.mean(axis=(1, 2)))


class TestCosineSimilarity:
    def test_self_similarity(self):
        a = np.array([1.0, 2.0, -3.0])
        assert np.isclose(cosine_similarity(Tensor(a), Tensor(a.copy())).item(), 1.0)

    def test_orthogonal(self):
        assert cosine_similarity(Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.0, 1.0]))).item() == 0.0

    def test_dot_norm_oracle(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=7), rng.normal(size=7)
        val = cosine_similarity(Tensor(a), Tensor(b)).item()
        ref = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        assert abs(val - ref) < 1e-7

    def test_zero_vector_guarded(self):
        val = cosine_similarity(Tensor(np.zeros(3)), Tensor(np.array([1.0, 0.0, 0.0]))).item()
        assert np.isfinite(val)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        assert np.isclose(softmax_cross_entropy(Tensor(np.zeros(4)), 1).item(), np.log(4))

    def test_extreme_logits_stable(self):
        loss = softmax_cross_entropy(Tensor(np.array([1000.0, 0.0])), 0).item()
        assert 0.0 <= loss < 1e-6

    def test_expsum_oracle(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=6)
        loss = softmax_cross_entropy(Tensor(logits), 3).item()
        ref = -np.log(np.exp(logits[3]) / np.exp(logits).sum())
        assert abs(loss - ref) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(InputDataError):
            softmax_cross_entropy(Tensor(np.zeros(3)), 3)

    def test_gradient_identity(self):
        rng = np.random.default_rng(8)
        logits = Tensor(rng.normal(size=5), requires_grad=True)
        with Tape() as tape:
            loss = softmax_cross_entropy(logits, 2)
        backward(tape, loss)
        expected = softmax(logits.data)
        expected[2] -= 1.0
        np.testing.assert_allclose(logits.grad, expected, atol=1e-7)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(x)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_nonparticipating_gets_no_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = tensor_sum(x)
            relu(y)  # on tape but unconnected to the loss
        backward(tape, loss)
        assert y.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = relu(x)
        with pytest.raises(UsageError):
            backward(tape, y)

    def test_determinism(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 8, 8))
        k = rng.normal(size=(2, 3, 3, 3))
        a = conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(2)), pad=1).data
        b = conv2d(Tensor(x.copy()), Tensor(k.copy()), Tensor(np.zeros(2)), pad=1).data
        assert np.array_equal(a, b)
