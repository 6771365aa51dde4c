"""Reading and writing feature-grid tensors and images.

The on-disk tensor format is FGT1, a deliberately dumb little-endian binary
layout so that other toolchains can produce or consume feature grids without
this package:

    bytes 0..3    magic "FGT1"
    bytes 4..15   three uint32 LE: C, H, W
    byte  16      dtype tag: 0 = float32, 1 = float64
    bytes 17..19  reserved, must be zero
    bytes 20..    C*H*W samples, channel-major then row-major, little-endian

Tag 1 (float64) exists so checkpoints can round-trip full-precision training
state; interchange files should normally use tag 0.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .errors import FormatError, ShapeMismatch

_MAGIC = b"FGT1"
_HEADER = struct.Struct("<4sIIIB3s")
_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_fgt1(fp, array: np.ndarray) -> None:
    """Write a (C, H, W) float32/float64 array to an open binary file."""
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ShapeMismatch(f"FGT1 stores (C, H, W) arrays, got shape {arr.shape}")
    tag = _DTYPE_TO_TAG.get(arr.dtype)
    if tag is None:
        raise FormatError(f"FGT1 stores float32 or float64, got dtype {arr.dtype}")
    c, h, w = arr.shape
    fp.write(_HEADER.pack(_MAGIC, c, h, w, tag, b"\x00\x00\x00"))
    fp.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def save_fgt1(path, array: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_fgt1(fp, array)


def read_fgt1(fp) -> np.ndarray:
    """Read one FGT1 tensor from an open binary file."""
    header = fp.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise FormatError("truncated FGT1 header")
    magic, c, h, w, tag, reserved = _HEADER.unpack(header)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if reserved != b"\x00\x00\x00":
        raise FormatError("reserved header bytes must be zero")
    dtype = _TAG_TO_DTYPE.get(tag)
    if dtype is None:
        raise FormatError(f"unknown dtype tag {tag}")
    if c == 0 or h == 0 or w == 0:
        raise FormatError(f"degenerate dimensions {c}x{h}x{w}")
    count = c * h * w
    payload = fp.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise FormatError(
            f"truncated FGT1 payload: expected {count * dtype.itemsize} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(c, h, w)
    return arr.astype(dtype.newbyteorder("="))


def load_fgt1(path) -> np.ndarray:
    with open(path, "rb") as fp:
        arr = read_fgt1(fp)
        if fp.read(1):
            raise FormatError("trailing bytes after FGT1 payload")
    return arr


# Rec. 601 luma weights, applied in float so grayscale conversion is not
# quantized through an 8-bit intermediate.
_LUMA = np.array([0.299, 0.587, 0.114])


def load_image(path, mode: str = "gray") -> np.ndarray:
    """Load a PNG/JPEG as a float64 grid in [0, 1].

    mode "gray" gives (1, H, W) via Rec. 601 luma; mode "rgb" gives (3, H, W).
    """
    if mode not in ("gray", "rgb"):
        raise ValueError(f"mode must be 'gray' or 'rgb', got {mode!r}")
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if mode == "rgb":
        return np.moveaxis(rgb, 2, 0)
    return (rgb @ _LUMA)[None, :, :]


def save_image(path, array: np.ndarray) -> None:
    """Save a (1, H, W) or (3, H, W) grid in [0, 1] as an 8-bit image."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeMismatch(f"expected (1, H, W) or (3, H, W), got shape {arr.shape}")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(u8[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(u8, 0, 2), mode="RGB").save(path)
