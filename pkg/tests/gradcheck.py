"""Shared finite-difference gradient checking helper.

Central differences with a fixed step are only valid where the function is
smooth; relu introduces kinks, so coordinates whose +/-h evaluations flip any
relu sign are excluded and resampled.  Everything runs in double precision.
"""

import numpy as np

from cineclr.tensor import Tape, Tensor, backward, record_relu_signs


def _signature(build):
    buf = []
    with record_relu_signs(buf):
        loss = build()
    return loss.item(), [b.tobytes() for b in buf]


def fd_gradcheck(build, tensors, n_coords=100, h=1e-5, rng=None):
    """Max relative error between analytic gradients and central differences.

    ``build()`` must recompute the scalar loss from the current tensor data.
    Returns (max_rel_err, n_checked).
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = build()
    backward(tape, loss)

    flat = [(t.data.reshape(-1), t.grad.reshape(-1)) for t in tensors]
    sizes = np.array([f[0].size for f in flat])
    total = sizes.sum()
    max_err = 0.0
    checked = 0
    attempts = 0
    while checked < n_coords and attempts < 20 * n_coords:
        attempts += 1
        j = int(rng.integers(total))
        ti = int(np.searchsorted(np.cumsum(sizes), j, side="right"))
        i = j - int(np.concatenate([[0], np.cumsum(sizes)])[ti])
        data, grad = flat[ti]
        orig = data[i]
        data[i] = orig + h
        lp, sig_p = _signature(build)
        data[i] = orig - h
        lm, sig_m = _signature(build)
        data[i] = orig
        if sig_p != sig_m:
            continue  # kink inside the interval; central difference invalid
        num = (lp - lm) / (2 * h)
        err = abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-8)
        max_err = max(max_err, err)
        checked += 1
    return max_err, checked
