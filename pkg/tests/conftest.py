"""Shared fixtures and synthesis helpers for the test suite."""

import numpy as np
import pytest

import alignkit._kernels as kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # Compile numba kernels once up front so timed tests measure steady state.
    kernels.warmup()


class CosineField:
    """A smooth band-limited texture defined analytically on the whole plane.

    Because it can be evaluated at arbitrary real coordinates, ground-truth
    warped copies are exact — the solver's bilinear interpolation is then the
    only approximation in play.
    """

    def __init__(self, seed, n_waves=12, min_wavelength=8.0, max_wavelength=64.0):
        rng = np.random.default_rng(seed)
        theta = rng.uniform(0, 2 * np.pi, n_waves)
        wavelength = rng.uniform(min_wavelength, max_wavelength, n_waves)
        self.fx = np.cos(theta) / wavelength
        self.fy = np.sin(theta) / wavelength
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        self.amp = rng.uniform(0.5, 1.0, n_waves)
        self.amp /= self.amp.sum() * 2.5  # keep values comfortably inside [0, 1]

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)[..., None]
        y = np.asarray(y, dtype=np.float64)[..., None]
        waves = self.amp * np.cos(2 * np.pi * (self.fx * x + self.fy * y) + self.phase)
        return 0.5 + waves.sum(axis=-1)

    def grid(self, height, width, origin=(0.0, 0.0)):
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        return self(xs + origin[0], ys + origin[1])[None]


def translated_pair(field, size, dx, dy):
    """Template plus an exactly shifted image: content moves by (+dx, +dy),
    so the ground truth template->image warp is translation(dx, dy)."""
    t = field.grid(size, size)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    i = field(xs - dx, ys - dy)[None]
    return t, i


def warped_image(field, homography, size):
    """Image whose content is the field seen through the inverse warp, so the
    template->image ground truth is exactly `homography` (no interpolation)."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    src = homography.inverse().apply(pts)
    return field(src[:, 0], src[:, 1]).reshape(1, size, size)


def translation_oracle(t, i, radius=8):
    """Exhaustive integer-shift SSD search with per-axis quadratic refinement.

    An independent estimate of the template->image translation: returns
    (dx, dy) minimizing sum (I(x + d) - T(x))^2 over the overlap window.
    """
    t2 = t[0]
    i2 = i[0]
    h, w = t2.shape
    m = radius
    core_t = t2[m:-m, m:-m]
    ssd = np.empty((2 * m + 1, 2 * m + 1))
    for a, dy in enumerate(range(-m, m + 1)):
        for b, dx in enumerate(range(-m, m + 1)):
            win = i2[m + dy : h - m + dy, m + dx : w - m + dx]
            ssd[a, b] = ((win - core_t) ** 2).sum()
    a0, b0 = np.unravel_index(np.argmin(ssd), ssd.shape)

    def refine(f_m, f_0, f_p):
        den = f_m - 2 * f_0 + f_p
        return 0.0 if den <= 0 else 0.5 * (f_m - f_p) / den

    dy = a0 - m
    dx = b0 - m
    if 0 < a0 < 2 * m:
        dy += refine(ssd[a0 - 1, b0], ssd[a0, b0], ssd[a0 + 1, b0])
    if 0 < b0 < 2 * m:
        dx += refine(ssd[a0, b0 - 1], ssd[a0, b0], ssd[a0, b0 + 1])
    return dx, dy
