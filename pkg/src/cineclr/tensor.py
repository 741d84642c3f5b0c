"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Operations executed while a
:class:`Tape` is active append their backward rules to the tape in execution
order, so replaying the tape in reverse is a valid reverse topological
traversal.  Gradients accumulate into ``Tensor.grad``.

All ops are pure functions of their inputs; nothing here mutates an input
tensor.  dtype follows the inputs (float32 for training, float64 for the
oracle/gradient-check tests).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, InputDataError, NumericsError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tape:
    """Ordered record of executed ops used for reverse-mode differentiation.

    Use as a context manager::

        with Tape() as tape:
            loss = some_composition(params, inputs)
        backward(tape, loss)
    """

    _active: Optional["Tape"] = None

    def __init__(self) -> None:
        self._ops: list[tuple["Tensor", Callable[[], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise UsageError("tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = None

    def record(self, out: "Tensor", backward_fn: Callable[[], None]) -> None:
        self._ops.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._ops)


class Tensor:
    """N-dimensional dense array, optionally participating in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype: Optional[np.dtype] = None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make_output(data: np.ndarray, inputs: Sequence[Tensor], op: str) -> tuple[Tensor, Optional[Tape]]:
    """Wrap op output; returns (tensor, tape-to-record-on or None)."""
    _check_finite(data, op)
    tape = Tape._active
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    return out, (tape if track else None)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out, tape = _make_output(a.data + b.data, (a, b), "add")
    if tape is not None:
        def bwd():
            if a.requires_grad:
                _accumulate(a, out.grad)
            if b.requires_grad:
                _accumulate(b, out.grad)
        tape.record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out, tape = _make_output(a.data * b.data, (a, b), "mul")
    if tape is not None:
        def bwd():
            if a.requires_grad:
                _accumulate(a, out.grad * b.data)
            if b.requires_grad:
                _accumulate(b, out.grad * a.data)
        tape.record(out, bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out, tape = _make_output(a.data * s, (a,), "scale")
    if tape is not None:
        def bwd():
            _accumulate(a, out.grad * s)
        tape.record(out, bwd)
    return out


def tensor_sum(a: Tensor) -> Tensor:
    out, tape = _make_output(np.asarray(a.data.sum(), dtype=a.dtype), (a,), "sum")
    if tape is not None:
        def bwd():
            _accumulate(a, np.full_like(a.data, out.grad))
        tape.record(out, bwd)
    return out


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    out, tape = _make_output(np.asarray(a.data.mean(), dtype=a.dtype), (a,), "mean")
    if tape is not None:
        def bwd():
            _accumulate(a, np.full_like(a.data, out.grad / n))
        tape.record(out, bwd)
    return out


_relu_sign_trace: Optional[list] = None


class record_relu_signs:
    """Collect relu activation sign patterns (used by finite-difference
    checks to detect kink crossings, where central differences are invalid)."""

    def __init__(self, buffer: list) -> None:
        self._buffer = buffer

    def __enter__(self) -> list:
        global _relu_sign_trace
        self._prev = _relu_sign_trace
        _relu_sign_trace = self._buffer
        return self._buffer

    def __exit__(self, *exc) -> None:
        global _relu_sign_trace
        _relu_sign_trace = self._prev


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0
    if _relu_sign_trace is not None:
        _relu_sign_trace.append(mask.copy())
    out, tape = _make_output(np.where(mask, a.data, 0), (a,), "relu")
    if tape is not None:
        def bwd():
            _accumulate(a, out.grad * mask)
        tape.record(out, bwd)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out, tape = _make_output(data, tensors, "concat")
    if tape is not None:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(lo, hi)
                    _accumulate(t, out.grad[tuple(idx)])
        tape.record(out, bwd)
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out, tape = _make_output(a.data.reshape(shape), (a,), "reshape")
    if tape is not None:
        def bwd():
            _accumulate(a, out.grad.reshape(a.shape))
        tape.record(out, bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out, tape = _make_output(a.data @ b.data, (a, b), "matmul")
    if tape is not None:
        def bwd():
            if a.requires_grad:
                _accumulate(a, out.grad @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ out.grad)
        tape.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# neural-net building blocks


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ x + bias``.

    ``x`` may be a vector ``[D_in]`` or a batch ``[B, D_in]``; ``weight`` is
    ``[D_out, D_in]`` and ``bias`` ``[D_out]``.
    """
    if weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ConfigurationError("dense: weight must be 2-d, bias 1-d")
    d_out, d_in = weight.shape
    if bias.shape[0] != d_out:
        raise ConfigurationError(f"dense: bias dim {bias.shape[0]} != {d_out}")
    batched = x.data.ndim == 2
    if x.shape[-1] != d_in or x.data.ndim not in (1, 2):
        raise ConfigurationError(f"dense: input shape {x.shape} incompatible with weight {weight.shape}")

    xb = x.data if batched else x.data[None, :]
    data = xb @ weight.data.T + bias.data
    if not batched:
        data = data[0]
    out, tape = _make_output(data, (x, weight, bias), "dense")
    if tape is not None:
        def bwd():
            g = out.grad if batched else out.grad[None, :]
            if x.requires_grad:
                gx = g @ weight.data
                _accumulate(x, gx if batched else gx[0])
            if weight.requires_grad:
                _accumulate(weight, g.T @ xb)
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=0))
        tape.record(out, bwd)
    return out


def _as_batched_chw(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], False
    if x.data.ndim == 4:
        return x.data, True
    raise ConfigurationError(f"{op}: expected [C,H,W] or [B,C,H,W], got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution (cross-correlation) with zero padding.

    ``x`` is ``[C_in,H,W]`` or ``[B,C_in,H,W]``; ``kernel`` is
    ``[C_out,C_in,kH,kW]`` with odd ``kH``, ``kW``.  Implemented via im2col so
    the inner product is one matmul.
    """
    if kernel.data.ndim != 4:
        raise ConfigurationError("conv2d: kernel must be [C_out,C_in,kH,kW]")
    c_out, c_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError("conv2d: kernel extents must be odd")
    if stride < 1 or pad < 0:
        raise ConfigurationError("conv2d: stride must be >= 1 and pad >= 0")
    if bias.shape != (c_out,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    xb, batched = _as_batched_chw(x, "conv2d")
    b, cx, h, w = xb.shape
    if cx != c_in:
        raise ConfigurationError(f"conv2d: input channels {cx} != kernel channels {c_in}")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ConfigurationError("conv2d: kernel larger than padded input")

    if pad:
        xp = np.zeros((b, c_in, h + 2 * pad, w + 2 * pad), dtype=xb.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = xb
    else:
        xp = xb
    # (B, C, H', W', kh, kw) windows, strided view
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h_out * w_out, c_in * kh * kw)
    wmat = kernel.data.reshape(c_out, c_in * kh * kw)
    res = col @ wmat.T + bias.data
    data = res.reshape(b, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    if not batched:
        data = data[0]
    out, tape = _make_output(data, (x, kernel, bias), "conv2d")
    if tape is not None:
        def bwd():
            g = out.grad if batched else out.grad[None]
            gmat = g.transpose(0, 2, 3, 1).reshape(b * h_out * w_out, c_out)
            if kernel.requires_grad:
                _accumulate(kernel, (gmat.T @ col).reshape(kernel.shape))
            if bias.requires_grad:
                _accumulate(bias, gmat.sum(axis=0))
            if x.requires_grad:
                dcol = (gmat @ wmat).reshape(b, h_out, w_out, c_in, kh, kw)
                dxp = np.zeros((b, c_in, h + 2 * pad, w + 2 * pad), dtype=xb.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                            dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
                _accumulate(x, dx if batched else dx[0])
        tape.record(out, bwd)
    return out


def pool2x2_avg(x: Tensor) -> Tensor:
    """Average pooling with a fixed 2x2 window and stride 2."""
    xb, batched = _as_batched_chw(x, "pool2x2_avg")
    b, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"pool2x2_avg: extents must be even, got {h}x{w}")
    data = xb.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    if not batched:
        data = data[0]
    out, tape = _make_output(data, (x,), "pool2x2_avg")
    if tape is not None:
        def bwd():
            g = out.grad if batched else out.grad[None]
            dx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
            _accumulate(x, dx if batched else dx[0])
        tape.record(out, bwd)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [C,H,W] -> [C] (or batched)."""
    xb, batched = _as_batched_chw(x, "global_avg_pool")
    b, c, h, w = xb.shape
    data = xb.mean(axis=(2, 3))
    if not batched:
        data = data[0]
    out, tape = _make_output(data, (x,), "global_avg_pool")
    if tape is not None:
        def bwd():
            g = out.grad if batched else out.grad[None]
            dx = np.broadcast_to(g[:, :, None, None] / (h * w), xb.shape)
            _accumulate(x, dx if batched else dx[0])
        tape.record(out, bwd)
    return out


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """cos(a, b) with norms clamped from below by ``eps``."""
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ConfigurationError(f"cosine_similarity: need equal-length vectors, got {a.shape}, {b.shape}")
    na = max(float(np.linalg.norm(a.data)), eps)
    nb = max(float(np.linalg.norm(b.data)), eps)
    dot = float(a.data @ b.data)
    val = dot / (na * nb)
    out, tape = _make_output(np.asarray(val, dtype=a.dtype), (a, b), "cosine_similarity")
    if tape is not None:
        # d cos / da = b/(na*nb) - cos * a/na^2 while ||a|| > eps, else b/(na*nb)
        def bwd():
            g = out.grad
            if a.requires_grad:
                da = b.data / (na * nb)
                if np.linalg.norm(a.data) > eps:
                    da = da - val * a.data / (na * na)
                _accumulate(a, g * da)
            if b.requires_grad:
                db = a.data / (na * nb)
                if np.linalg.norm(b.data) > eps:
                    db = db - val * b.data / (nb * nb)
                _accumulate(b, g * db)
        tape.record(out, bwd)
    return out


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """Negative log softmax probability of the true class.

    ``logits`` may be ``[K]`` with an int label, or ``[B,K]`` with a length-B
    label sequence (the batched form returns the mean loss).  Computed with
    max-subtraction; the gradient is ``softmax - onehot`` (scaled by 1/B when
    batched).
    """
    batched = logits.data.ndim == 2
    if logits.data.ndim not in (1, 2):
        raise ConfigurationError(f"softmax_cross_entropy: logits must be 1-d or 2-d, got {logits.shape}")
    lg = logits.data if batched else logits.data[None]
    bsz, k = lg.shape
    labels = np.asarray(label, dtype=np.int64).reshape(-1) if batched else np.asarray([int(label)])
    if labels.shape[0] != bsz:
        raise InputDataError(f"softmax_cross_entropy: {labels.shape[0]} labels for batch of {bsz}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InputDataError(f"softmax_cross_entropy: label out of range [0,{k})")
    shifted = lg - lg.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    losses = logz - shifted[np.arange(bsz), labels]
    val = np.asarray(losses.mean(), dtype=logits.dtype)
    out, tape = _make_output(val, (logits,), "softmax_cross_entropy")
    if tape is not None:
        def bwd():
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(bsz), labels] -= 1.0
            g = out.grad * p / bsz
            _accumulate(logits, g if batched else g[0])
        tape.record(out, bwd)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Run reverse-mode accumulation for a scalar loss recorded on ``tape``."""
    if loss.data.ndim != 0:
        raise UsageError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward: loss does not participate in the tape")
    if tape._consumed:
        raise UsageError("backward: tape already consumed")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, op in reversed(tape._ops):
        if out.grad is not None:  # op never reached the loss otherwise
            op()


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain (non-differentiated) stable softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
