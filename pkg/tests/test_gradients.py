"""Finite-difference gradient checks for every differentiable op and the
full encoder -> projection -> contrastive-loss composite (double precision)."""

import numpy as np
import pytest

from cineclr.contrastive import NTXentConfig, init_projection_head, ntxent_loss, project
from cineclr.encoder import EncoderConfig, encoder_forward, init_encoder
from cineclr.tensor import (
    Tensor, add, concat, conv2d, cosine_similarity, dense, global_avg_pool,
    matmul, mul, pool2x2_avg, relu, softmax_cross_entropy, tensor_mean, tensor_sum,
)
from gradcheck import fd_gradcheck

TOL = 1e-5
rng = np.random.default_rng(42)


def grad_tensor(*shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def check(build, tensors, n=100):
    err, checked = fd_gradcheck(build, tensors, n_coords=n, rng=np.random.default_rng(7))
    assert checked >= n
    assert err <= TOL, f"max relative error {err:.3e}"


def test_conv2d_grad():
    x = grad_tensor(2, 3, 8, 8)
    k = grad_tensor(4, 3, 3, 3)
    b = grad_tensor(4)
    check(lambda: tensor_sum(mul(conv2d(x, k, b, 2, 1), conv2d(x, k, b, 2, 1))), [x, k, b])


def test_dense_grad():
    x = grad_tensor(5, 6)
    w = grad_tensor(4, 6)
    b = grad_tensor(4)
    check(lambda: tensor_sum(mul(dense(x, w, b), dense(x, w, b))), [x, w, b])


def test_relu_grad():
    x = grad_tensor(40)
    check(lambda: tensor_sum(mul(relu(x), relu(x))), [x], n=40)


def test_pool_and_gap_grad():
    x = grad_tensor(2, 3, 4, 4)
    check(lambda: tensor_sum(mul(pool2x2_avg(x), pool2x2_avg(x))), [x])
    y = grad_tensor(2, 3, 4, 4)
    check(lambda: tensor_sum(mul(global_avg_pool(y), global_avg_pool(y))), [y])


def test_elementwise_and_matmul_grad():
    a = grad_tensor(3, 4)
    b = grad_tensor(3, 4)
    check(lambda: tensor_mean(mul(add(a, b), a)), [a, b], n=24)
    m = grad_tensor(3, 5)
    n_ = grad_tensor(5, 2)
    check(lambda: tensor_sum(mul(matmul(m, n_), matmul(m, n_))), [m, n_], n=25)
    c = grad_tensor(4)
    d = grad_tensor(3)
    check(lambda: tensor_sum(mul(concat([c, d]), concat([c, d]))), [c, d], n=14)


def test_cosine_similarity_grad():
    a = grad_tensor(9)
    b = grad_tensor(9)
    check(lambda: cosine_similarity(a, b), [a, b], n=18)


def test_softmax_cross_entropy_grad():
    logits = grad_tensor(8, 5)
    labels = np.array([0, 1, 2, 3, 4, 0, 1, 2])
    check(lambda: softmax_cross_entropy(logits, labels), [logits], n=40)


def test_ntxent_grad():
    z = grad_tensor(8, 12)
    cfg = NTXentConfig(temperature=0.1, batch_pairs=4)
    check(lambda: ntxent_loss(z, cfg), [z], n=96)


@pytest.mark.parametrize("tau", [0.1, 1.0])
def test_full_composite_grad(tau):
    init_rng = np.random.default_rng(3)
    cfg = EncoderConfig(image_size=16, channels=(4, 8), embed_dim=10)
    params = init_encoder(cfg, init_rng, dtype=np.float64)
    head = init_projection_head(10, 10, 8, init_rng, dtype=np.float64)
    x = np.asarray(init_rng.uniform(size=(8, 1, 16, 16)))
    nt = NTXentConfig(temperature=tau, batch_pairs=4)

    def build():
        h = encoder_forward(params, Tensor(x), cfg)
        return ntxent_loss(project(h, head), nt)

    check(build, list(params.values()) + list(head.values()), n=120)


def test_encoder_shape_algebra():
    for channels, embed in [((8, 16, 32), 64), ((4, 8), 16), ((8,), 32)]:
        cfg = EncoderConfig(image_size=64, channels=channels, embed_dim=embed)
        params = init_encoder(cfg, np.random.default_rng(0))
        out = encoder_forward(params, Tensor(np.zeros((2, 1, 64, 64), dtype=np.float32)), cfg)
        assert out.shape == (2, embed)
