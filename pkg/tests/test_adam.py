"""Adam optimizer contracts, including a hand-stepped scalar reference."""

import numpy as np

from cineclr.optim import AdamState, adam_step, clip_grad_norm
from cineclr.tensor import Tensor


def scalar_adam_reference(theta, grads, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """Independent per-step scalar Adam with decoupled weight decay."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        theta -= lr * wd * theta
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        theta -= lr * mhat / (np.sqrt(vhat) + eps)
    return theta


def test_zero_gradient_no_decay_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState(lr=0.1, weight_decay=0.0)
    adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_first_step_is_signed_lr():
    p = {"w": Tensor(np.array([0.0, 0.0]), requires_grad=True)}
    state = AdamState(lr=1e-3, weight_decay=0.0)
    adam_step(p, {"w": np.array([0.5, -2.0])}, state)
    # bias-corrected first step: delta = -lr * g / (|g| + eps') ~ -lr*sign(g)
    np.testing.assert_allclose(p["w"].data, [-1e-3, 1e-3], rtol=1e-4)


def test_five_steps_match_scalar_reference():
    lr, wd = 0.05, 0.01
    theta0 = 1.7
    p = {"w": Tensor(np.array([theta0]), requires_grad=True)}
    state = AdamState(lr=lr, weight_decay=wd)
    grads = []
    for _ in range(5):
        g = float(p["w"].data[0])        # gradient of theta^2/2 is theta
        grads.append(g)
        adam_step(p, {"w": np.array([g])}, state)
    ref = scalar_adam_reference(theta0, grads, lr, wd)
    assert abs(p["w"].data[0] - ref) < 1e-10


def test_decay_applied_before_update():
    # with zero gradient, only the decoupled decay moves the parameter
    p = {"w": Tensor(np.array([2.0]), requires_grad=True)}
    state = AdamState(lr=0.1, weight_decay=0.5)
    adam_step(p, {"w": np.array([0.0])}, state)
    assert abs(p["w"].data[0] - 2.0 * (1 - 0.1 * 0.5)) < 1e-12


def test_step_counter_and_moment_shapes():
    p = {"w": Tensor(np.ones((3, 2)), requires_grad=True)}
    state = AdamState(lr=1e-3)
    for expect in (1, 2, 3):
        adam_step(p, {"w": np.ones((3, 2))}, state)
        assert state.step == expect
    assert state.m["w"].shape == (3, 2)
    assert state.v["w"].shape == (3, 2)


def test_clip_grad_norm_scales_to_cap():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[0.0], [4.0]])}
    pre = clip_grad_norm(g, 2.5)          # global norm is 5
    assert abs(pre - 5.0) < 1e-12
    clipped = np.sqrt(sum((x * x).sum() for x in g.values()))
    assert abs(clipped - 2.5) < 1e-12
    assert np.allclose(g["a"], [1.5, 0.0])  # direction preserved


def test_clip_grad_norm_noop_below_cap_and_disabled():
    g = {"a": np.array([0.6, 0.8])}
    assert abs(clip_grad_norm(g, 2.0) - 1.0) < 1e-12
    assert np.allclose(g["a"], [0.6, 0.8])
    big = {"a": np.array([30.0, 40.0])}
    assert abs(clip_grad_norm(big, 0.0) - 50.0) < 1e-12
    assert np.allclose(big["a"], [30.0, 40.0])  # <=0 disables clipping
