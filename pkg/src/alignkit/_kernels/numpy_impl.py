"""Pure-numpy reference implementations of the hot kernels.

Selected when numba is unavailable or ALIGNKIT_DISABLE_NUMBA is set.  Each function
here is the semantic reference for its numba twin in numba_impl.py; the two
agree to float rounding (summation order differs).
"""

from __future__ import annotations

import numpy as np


def _bilinear_parts(xs, ys, h, w):
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    inb = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    x0i = np.clip(x0i, 0, w - 1)
    y0i = np.clip(y0i, 0, h - 1)
    x1i = np.minimum(x0i + 1, w - 1)
    y1i = np.minimum(y0i + 1, h - 1)
    return x0i, y0i, x1i, y1i, fx, fy, inb


def bilinear_sample_points(data, xs, ys):
    """Sample all C channels at N continuous points.

    Returns (vals (C, N) float64, inb (N,) bool); vals are 0 out of bounds.
    """
    c, h, w = data.shape
    x0, y0, x1, y1, fx, fy, inb = _bilinear_parts(xs, ys, h, w)
    d = data.astype(np.float64, copy=False)
    v00 = d[:, y0, x0]
    v10 = d[:, y0, x1]
    v01 = d[:, y1, x0]
    v11 = d[:, y1, x1]
    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    vals = v00 * w00 + v10 * w10 + v01 * w01 + v11 * w11
    vals[:, ~inb] = 0.0
    return vals, inb


def warp_coords(m, out_h, out_w):
    """Homography-warped coordinates of every pixel of an out_h x out_w grid."""
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    den = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    xw = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / den
    yw = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / den
    return xw, yw


def warp_grid_resample(data, m, out_h, out_w):
    """Resample a grid through a homography; returns (out, mask).

    Output pixel (y, x) takes the bilinear sample of data at m @ (x, y, 1).
    out has data's dtype; mask marks samples inside bilinear support.
    """
    c = data.shape[0]
    xw, yw = warp_coords(m, out_h, out_w)
    vals, inb = bilinear_sample_points(data, xw.ravel(), yw.ravel())
    out = vals.reshape(c, out_h, out_w).astype(data.dtype)
    mask = inb.reshape(out_h, out_w)
    return out, mask


def iclk_rhs(tpl, sd, img, m):
    """Fused ICLK step accumulation.

    Warps template pixel coordinates by m, samples img there, and accumulates
    the steepest-descent right-hand side over valid pixels:

        rhs = sum_valid sd[c,y,x,:] * (img(W(x)) - tpl[c,y,x])

    Returns (rhs (8,), abs_residual_sum, valid_count).
    """
    c, h, w = tpl.shape
    xw, yw = warp_coords(m, h, w)
    vals, inb = bilinear_sample_points(img, xw.ravel(), yw.ravel())
    r = vals.reshape(c, h, w) - tpl
    r[:, ~inb.reshape(h, w)] = 0.0
    rhs = np.einsum("chwk,chw->k", sd, r)
    abs_sum = np.abs(r).sum()
    return rhs, float(abs_sum), int(inb.sum())


def conv2d_forward(x, weights, bias, stride):
    """Valid (unpadded) strided convolution; accumulates in float64."""
    cin, h, w = x.shape
    k = weights.shape[2]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride].astype(np.float64, copy=False)
    y = np.einsum("ihwab,oiab->ohw", win, weights.astype(np.float64, copy=False))
    y += bias.astype(np.float64)[:, None, None]
    return y.astype(x.dtype)


def conv2d_bwd_input(gy, weights, stride, hin, win_):
    """Gradient of conv2d_forward w.r.t. its input."""
    cout, ho, wo = gy.shape
    cin = weights.shape[1]
    k = weights.shape[2]
    gx = np.zeros((cin, hin, win_), dtype=np.float64)
    t = np.einsum("ohw,oiab->ihwab", gy, weights)
    for a in range(k):
        for b in range(k):
            gx[:, a : a + ho * stride : stride, b : b + wo * stride : stride] += t[..., a, b]
    return gx


def conv2d_bwd_weights(x, gy, k, stride):
    """Gradient of conv2d_forward w.r.t. the kernel weights."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride].astype(np.float64, copy=False)
    return np.einsum("ihwab,ohw->oiab", win, gy)


def bilinear_scatter_add(gvals, xs, ys, inb, h, w):
    """Adjoint of bilinear_sample_points w.r.t. the source grid values."""
    c = gvals.shape[0]
    x0, y0, x1, y1, fx, fy, _ = _bilinear_parts(xs, ys, h, w)
    g = np.where(inb[None, :], gvals, 0.0)
    out = np.zeros((c, h, w), dtype=np.float64)
    np.add.at(out, (slice(None), y0, x0), g * ((1.0 - fx) * (1.0 - fy)))
    np.add.at(out, (slice(None), y0, x1), g * (fx * (1.0 - fy)))
    np.add.at(out, (slice(None), y1, x0), g * ((1.0 - fx) * fy))
    np.add.at(out, (slice(None), y1, x1), g * (fx * fy))
    return out


def bilinear_coord_grad(data, xs, ys, inb, gvals):
    """Adjoint of bilinear_sample_points w.r.t. the sampling coordinates."""
    c, h, w = data.shape
    x0, y0, x1, y1, fx, fy, _ = _bilinear_parts(xs, ys, h, w)
    d = data.astype(np.float64, copy=False)
    v00 = d[:, y0, x0]
    v10 = d[:, y0, x1]
    v01 = d[:, y1, x0]
    v11 = d[:, y1, x1]
    dvdx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy
    dvdy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx
    g = np.where(inb[None, :], gvals, 0.0)
    gxs = (g * dvdx).sum(axis=0)
    gys = (g * dvdy).sum(axis=0)
    return gxs, gys
