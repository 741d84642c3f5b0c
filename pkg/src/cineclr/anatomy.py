"""Cardiac mask construction, application, and perturbation.

Masks are plain boolean numpy rasters with the same height/width as the
label masks they derive from.  All functions are pure.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import InputDataError
from .phantom import LBL_BACKGROUND

_SQUARE = np.ones((3, 3), dtype=bool)   # 3x3 square structuring element


def build_cardiac_mask(label_mask: np.ndarray) -> np.ndarray:
    """Union of LV blood pool, LV myocardium, and RV labels."""
    return np.asarray(label_mask) != LBL_BACKGROUND


def dilate(mask: np.ndarray, px: int) -> np.ndarray:
    if px <= 0:
        return mask.astype(bool).copy()
    return ndimage.binary_dilation(mask, structure=_SQUARE, iterations=px)


def apply_mask(image: np.ndarray, mask: np.ndarray, dilate_px: int = 0) -> np.ndarray:
    """Zero the image outside the (optionally dilated) mask.

    ``image`` is (1,H,W) or (H,W); pixels inside the dilated mask are
    preserved bit-exactly, so the operation is idempotent.
    """
    img = np.asarray(image)
    plane = img[0] if img.ndim == 3 else img
    if plane.shape != mask.shape:
        raise InputDataError(f"apply_mask: image {plane.shape} vs mask {mask.shape}")
    if dilate_px < 0:
        raise InputDataError("apply_mask: dilate_px must be >= 0")
    m = dilate(mask, dilate_px)
    out = np.where(m, plane, plane.dtype.type(0))
    return out[None] if img.ndim == 3 else out


def perturb_mask(mask: np.ndarray, rng: np.random.Generator,
                 erode_px: int = 0, dilate_px: int = 0,
                 hole_rate: float = 0.0) -> np.ndarray:
    """Emulate segmentation error: erode, dilate, then punch random holes.

    Each remaining true pixel is flipped to false with probability
    ``hole_rate``; deterministic for a given rng stream.
    """
    if erode_px < 0 or dilate_px < 0 or not (0.0 <= hole_rate <= 1.0):
        raise InputDataError("perturb_mask: extents must be >= 0 and hole_rate in [0,1]")
    out = np.asarray(mask, dtype=bool)
    if erode_px:
        out = ndimage.binary_erosion(out, structure=_SQUARE, iterations=erode_px)
    if dilate_px:
        out = ndimage.binary_dilation(out, structure=_SQUARE, iterations=dilate_px)
    if hole_rate > 0:
        holes = rng.random(out.shape) < hole_rate
        out = out & ~holes
    return out.copy()


def mask_stats(mask: np.ndarray) -> dict:
    """Foreground fraction and 4-connectivity component count."""
    m = np.asarray(mask, dtype=bool)
    four = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    _, count = ndimage.label(m, structure=four)
    return {"foreground_fraction": float(m.mean()), "component_count": int(count)}
