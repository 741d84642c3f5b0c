"""Bit-exact raster file format.

Layout: magic ``CMRT``, little-endian u32 width, u32 height, u32 channels,
u8 dtype code (0 = float32 image, 1 = uint8 label), then the row-major
payload.  Arrays are stored channel-major, i.e. shape (channels, height,
width); 2-d arrays are written as a single channel.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, TruncatedRasterError

MAGIC = b"CMRT"
_HEADER = struct.Struct("<4sIIIB")
DTYPE_F32 = 0
DTYPE_U8 = 1
_CODES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}


def write_raster(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DatasetFormatError(f"raster must be 2-d or 3-d, got shape {arr.shape}")
    if arr.dtype == np.float32:
        code = DTYPE_F32
    elif arr.dtype == np.uint8:
        code = DTYPE_U8
    else:
        raise DatasetFormatError(f"unsupported raster dtype {arr.dtype}")
    c, h, w = arr.shape
    payload = np.ascontiguousarray(arr.astype(_CODES[code], copy=False)).tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, w, h, c, code))
        f.write(payload)


def read_raster(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise TruncatedRasterError(f"{path}: header truncated")
        magic, w, h, c, code = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {magic!r}")
        if code not in _CODES:
            raise DatasetFormatError(f"{path}: unknown dtype code {code}")
        dtype = _CODES[code]
        expect = w * h * c * dtype.itemsize
        payload = f.read(expect + 1)
    if len(payload) < expect:
        raise TruncatedRasterError(f"{path}: payload truncated ({len(payload)} of {expect} bytes)")
    if len(payload) > expect:
        raise DatasetFormatError(f"{path}: trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(c, h, w)
    if code == DTYPE_F32:
        arr = arr.astype(np.float32)
    else:
        arr = arr.astype(np.uint8)
    return arr
