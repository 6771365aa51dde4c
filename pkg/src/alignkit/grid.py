"""Feature grids: multi-channel raster data plus the sampling/warping ops on it.

A FeatureGrid is a (C, H, W) float array — a grayscale image is a 1-channel
grid, a convnet activation map is a C-channel one.  All geometry in this
package works on grids through the functions here, so the alignment solver is
indifferent to whether its inputs are raw pixels or learned features.

Coordinate convention: a point (x, y) is measured in pixels with x along the
width axis and y along the height axis; integer coordinates land exactly on
pixel centers.  Bilinear support is the closed box [0, W-1] x [0, H-1], and
every sampling routine reports validity against that box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import GridTooSmall, OutOfBounds, ShapeMismatch
from .warp import Homography


def _coerce_data(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise ShapeMismatch(f"grid data must be (C, H, W), got shape {arr.shape}")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float64)
    if arr.shape[1] < 2 or arr.shape[2] < 2:
        raise GridTooSmall(
            f"grid must be at least 2x2 for bilinear sampling, got {arr.shape[1]}x{arr.shape[2]}"
        )
    return np.ascontiguousarray(arr)


@dataclass
class FeatureGrid:
    """A (C, H, W) raster of float32 or float64 samples."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _coerce_data(self.data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @classmethod
    def from_image(cls, image) -> "FeatureGrid":
        """Wrap an (H, W) or (H, W, 3) image as a grid."""
        arr = np.asarray(image)
        if arr.ndim == 2:
            return cls(arr[None, :, :])
        if arr.ndim == 3 and arr.shape[2] in (1, 3):
            return cls(np.moveaxis(arr, 2, 0))
        raise ShapeMismatch(f"expected (H, W) or (H, W, 3) image, got shape {arr.shape}")


@dataclass
class ValidityMask:
    """Boolean (H, W) mask of pixels whose bilinear sample was in bounds."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ShapeMismatch(f"mask must be (H, W), got shape {self.mask.shape}")

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())

    @classmethod
    def full(cls, height: int, width: int) -> "ValidityMask":
        return cls(np.ones((height, width), dtype=bool))


def sample_bilinear(grid: FeatureGrid, points: np.ndarray):
    """Bilinearly sample all channels at N points.

    points is (N, 2) as (x, y).  Returns (values (C, N) float64, valid (N,)
    bool); out-of-support values are zero.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeMismatch(f"points must be (N, 2), got shape {pts.shape}")
    xs = np.ascontiguousarray(pts[:, 0])
    ys = np.ascontiguousarray(pts[:, 1])
    vals, inb = _kernels.bilinear_sample_points(grid.data, xs, ys)
    return vals, inb


def gradient(grid: FeatureGrid):
    """Per-channel spatial gradients (gx, gy) as float64 FeatureGrids.

    Central differences in the interior, one-sided at the borders.
    """
    d = grid.data.astype(np.float64, copy=False)
    gy, gx = np.gradient(d, axis=(1, 2))
    return FeatureGrid(gx), FeatureGrid(gy)


def warp_grid(grid: FeatureGrid, warp: Homography, out_shape: tuple):
    """Resample a grid through a homography.

    Output pixel (x, y) takes the source sample at warp(x, y); out_shape is
    (height, width).  Returns (FeatureGrid, ValidityMask); invalid pixels
    are zero.  The identity warp reproduces the grid bit-exactly.
    """
    out_h, out_w = int(out_shape[0]), int(out_shape[1])
    if out_h < 2 or out_w < 2:
        raise GridTooSmall(f"output shape must be at least 2x2, got {out_h}x{out_w}")
    out, mask = _kernels.warp_grid_resample(grid.data, warp.m, out_h, out_w)
    return FeatureGrid(out), ValidityMask(mask)


def normalize_per_channel(grid: FeatureGrid) -> FeatureGrid:
    """Shift/scale each channel to zero mean, unit standard deviation.

    A channel with standard deviation below 1e-12 comes back all zeros
    instead of numerically exploding.
    """
    d = grid.data.astype(np.float64, copy=False)
    mean = d.mean(axis=(1, 2), keepdims=True)
    std = d.std(axis=(1, 2), keepdims=True)
    centered = d - mean
    out = np.where(std < 1e-12, 0.0, centered / np.where(std < 1e-12, 1.0, std))
    return FeatureGrid(out.astype(grid.data.dtype))


def extract_patch(grid: FeatureGrid, y0: int, x0: int, height: int, width: int) -> FeatureGrid:
    """Copy out an axis-aligned sub-grid; raises OutOfBounds if it overhangs."""
    if y0 < 0 or x0 < 0 or y0 + height > grid.height or x0 + width > grid.width:
        raise OutOfBounds(
            f"patch [{y0}:{y0 + height}, {x0}:{x0 + width}] exceeds grid "
            f"{grid.height}x{grid.width}"
        )
    return FeatureGrid(grid.data[:, y0 : y0 + height, x0 : x0 + width].copy())
