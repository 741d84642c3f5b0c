"""Small convolutional image encoder.

A stack of conv(3x3, pad 1) -> ReLU -> 2x2 average pool blocks followed by
global average pooling and a dense layer to the embedding dimension.  Batch
norm is deliberately absent so every forward pass is a pure deterministic
function of the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, conv2d, dense, global_avg_pool, pool2x2_avg, relu


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    in_channels: int = 1
    channels: tuple = (8, 16, 32)
    embed_dim: int = 64

    def validate(self) -> None:
        if self.image_size % (2 ** len(self.channels)) != 0:
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by 2^{len(self.channels)} pooling stages")
        if self.embed_dim < 2 or not self.channels:
            raise ConfigurationError("encoder needs >= 1 conv block and embed_dim >= 2")


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
                    dtype=np.float32) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32) -> dict[str, Tensor]:
    """Kaiming-uniform (fan-in) conv/dense weights, zero biases."""
    cfg.validate()
    params: dict[str, Tensor] = {}
    c_prev = cfg.in_channels
    for i, c in enumerate(cfg.channels):
        params[f"conv{i}.w"] = Tensor(
            kaiming_uniform(rng, (c, c_prev, 3, 3), fan_in=c_prev * 9, dtype=dtype),
            requires_grad=True)
        params[f"conv{i}.b"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        c_prev = c
    params["embed.w"] = Tensor(
        kaiming_uniform(rng, (cfg.embed_dim, c_prev), fan_in=c_prev, dtype=dtype),
        requires_grad=True)
    params["embed.b"] = Tensor(np.zeros(cfg.embed_dim, dtype=dtype), requires_grad=True)
    return params


def encoder_forward(params: dict[str, Tensor], x: Tensor, cfg: EncoderConfig) -> Tensor:
    """Map images [B,1,H,W] (or [1,H,W]) to embeddings [B,E] (or [E])."""
    h = x
    for i in range(len(cfg.channels)):
        h = conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=1, pad=1)
        h = relu(h)
        h = pool2x2_avg(h)
    h = global_avg_pool(h)
    return dense(h, params["embed.w"], params["embed.b"])


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v.copy() for k, v in params.items()}


def params_checksum(params: dict[str, Tensor]) -> str:
    import hashlib
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()
