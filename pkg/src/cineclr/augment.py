"""Stochastic view transforms for contrastive positive pairs.

Order of application: crop -> bilinear resize back to the original size ->
rotation about the image center (bilinear, zero fill) -> mean-anchored
contrast jitter -> flips.  A degenerate policy reproduces the input
bit-exactly.  All randomness flows through explicit generator streams, so a
(image, seed) pair fully determines the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, InputDataError


@dataclass(frozen=True)
class AugPolicy:
    crop_scale: tuple = (0.7, 1.0)
    rotation_deg: float = 15.0
    contrast: tuple = (0.7, 1.3)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    noise_sigma: float = 0.03    # Gaussian view noise; stabilizes contrastive training

    def validate(self) -> None:
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigurationError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.contrast[0] <= 0 or self.contrast[0] > self.contrast[1]:
            raise ConfigurationError(f"contrast range invalid: {self.contrast}")
        if self.rotation_deg < 0 or self.noise_sigma < 0:
            raise ConfigurationError("rotation_deg and noise_sigma must be >= 0")
        for p in (self.hflip_prob, self.vflip_prob):
            if not (0.0 <= p <= 1.0):
                raise ConfigurationError("flip probabilities must be in [0,1]")


IDENTITY_POLICY = AugPolicy(crop_scale=(1.0, 1.0), rotation_deg=0.0,
                            contrast=(1.0, 1.0), hflip_prob=0.0, vflip_prob=0.0,
                            noise_sigma=0.0)


@dataclass(frozen=True)
class TransformParams:
    crop_box: tuple            # (y0, x0, h, w)
    rotation_deg: float
    contrast: float
    hflip: bool
    vflip: bool
    noise_sigma: float = 0.0
    noise_seed: int = 0


@dataclass(frozen=True)
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    params_a: TransformParams
    params_b: TransformParams


def sample_params(policy: AugPolicy, rng: np.random.Generator,
                  image_hw: tuple = (64, 64)) -> TransformParams:
    policy.validate()
    h, w = image_hw
    s = rng.uniform(*policy.crop_scale)
    ch = max(1, int(round(s * h)))
    cw = max(1, int(round(s * w)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    angle = float(rng.uniform(-policy.rotation_deg, policy.rotation_deg)) \
        if policy.rotation_deg > 0 else 0.0
    c = float(rng.uniform(*policy.contrast))
    hflip = bool(rng.random() < policy.hflip_prob)
    vflip = bool(rng.random() < policy.vflip_prob)
    noise_seed = int(rng.integers(0, 2 ** 31)) if policy.noise_sigma > 0 else 0
    return TransformParams(crop_box=(y0, x0, ch, cw), rotation_deg=angle,
                           contrast=c, hflip=hflip, vflip=vflip,
                           noise_sigma=policy.noise_sigma, noise_seed=noise_seed)


def _resize_bilinear(plane: np.ndarray, out_hw: tuple) -> np.ndarray:
    h, w = plane.shape
    oh, ow = out_hw
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    yy, xx = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    return ndimage.map_coordinates(plane, [yy, xx], order=1, mode="nearest")


def _rotate_bilinear(plane: np.ndarray, angle_deg: float) -> np.ndarray:
    h, w = plane.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = math.radians(angle_deg)
    cos, sin = math.cos(a), math.sin(a)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse mapping: source coordinates for each output pixel
    sy = cy + cos * dy - sin * dx
    sx = cx + sin * dy + cos * dx
    # snap coordinates a float-epsilon outside the grid back onto it, so
    # right-angle rotations reduce to exact index permutations
    for s in (sy, sx):
        r = np.round(s)
        near = np.abs(s - r) < 1e-9
        s[near] = r[near]
    return ndimage.map_coordinates(plane, [sy, sx], order=1, mode="constant", cval=0.0)


def apply_transform(image: np.ndarray, p: TransformParams) -> np.ndarray:
    """Apply reified transform parameters; same shape out, values in [0,1]."""
    img = np.asarray(image)
    plane = img[0] if img.ndim == 3 else img
    h, w = plane.shape
    y0, x0, ch, cw = p.crop_box
    if y0 < 0 or x0 < 0 or y0 + ch > h or x0 + cw > w or ch < 1 or cw < 1:
        raise InputDataError(f"crop box {p.crop_box} outside {h}x{w} image")
    dtype = plane.dtype
    out = plane
    if (y0, x0, ch, cw) != (0, 0, h, w):
        out = _resize_bilinear(out[y0:y0 + ch, x0:x0 + cw].astype(np.float64), (h, w))
    if p.rotation_deg != 0.0:
        out = _rotate_bilinear(np.asarray(out, dtype=np.float64), p.rotation_deg)
    if p.contrast != 1.0:
        mean = out.mean()
        out = np.clip(mean + p.contrast * (out - mean), 0.0, 1.0)
    if p.noise_sigma > 0.0:
        noise_rng = np.random.default_rng(p.noise_seed)
        out = np.clip(out + noise_rng.normal(0.0, p.noise_sigma, out.shape), 0.0, 1.0)
    if p.hflip:
        out = out[:, ::-1]
    if p.vflip:
        out = out[::-1, :]
    out = np.ascontiguousarray(out, dtype=dtype)
    return out[None] if img.ndim == 3 else out


def make_view_pair(image: np.ndarray, policy: AugPolicy,
                   rng: np.random.Generator) -> ViewPair:
    """Two independent augmented views of one source image (a positive pair)."""
    img = np.asarray(image)
    hw = img.shape[-2:]
    pa = sample_params(policy, rng, hw)
    pb = sample_params(policy, rng, hw)
    return ViewPair(view_a=apply_transform(image, pa),
                    view_b=apply_transform(image, pb),
                    params_a=pa, params_b=pb)


def view_rng(seed: int, epoch: int, case_index: int) -> np.random.Generator:
    """Per-sample augmentation stream: hash of (seed, epoch, case)."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(epoch, case_index)))
