"""Iterative inverse-compositional Lucas-Kanade alignment on feature grids.

The inverse-compositional trick linearizes around the *template* instead of
the image, so the expensive parts — template gradient, per-pixel
steepest-descent rows, and the 8x8 Gauss-Newton Hessian — are computed once
in precompute_template and reused in every iteration.  Each iclk_step only
warps the image onto the template lattice, accumulates the mask-restricted
right-hand side, solves the damped 8x8 system, and the caller composes the
increment *inversely* into the running warp.

All solving happens in the coordinates of the grids handed in; if those are
strided feature maps, converting the result back to image coordinates via
conjugate_by_scale is the caller's job.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import GridTooSmall, SingularHessian
from .grid import FeatureGrid
from .warp import (
    Homography,
    WarpParams,
    corner_displacements,
    grid_corners,
    update_inverse_compositional,
)

# 1/condition-number below which the damped 8x8 system counts as singular.
_RCOND_FLOOR = 1e-12


@dataclass
class SolverConfig:
    """Iteration budget, stopping rule, and damping.

    stop_kind "delta_p" stops once the increment moves no template corner by
    more than delta_p_corner_epsilon pixels; "residual" stops once the mean
    absolute residual over valid pixels and channels drops below
    residual_epsilon.  hessian_damping is the Tikhonov coefficient alpha in
    lambda = alpha * trace(H)/8.  The trace is dominated by the quartic
    projective columns of the steepest-descent rows (~ x^4 at the far
    corners), so alpha must stay tiny or lambda swamps the small
    translation/projective eigenvalues and stalls convergence; the default
    only catches truly rank-deficient systems.
    """

    max_iterations: int = 50
    stop_kind: str = "delta_p"
    delta_p_corner_epsilon: float = 0.01
    residual_epsilon: float = 1e-3
    hessian_damping: float = 1e-12

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.stop_kind not in ("delta_p", "residual"):
            raise ValueError(f"stop_kind must be 'delta_p' or 'residual', got {self.stop_kind!r}")
        if not self.delta_p_corner_epsilon > 0:
            raise ValueError("delta_p_corner_epsilon must be > 0")
        if not self.residual_epsilon > 0:
            raise ValueError("residual_epsilon must be > 0")
        if self.hessian_damping < 0:
            raise ValueError("hessian_damping must be >= 0")


@dataclass
class IterationLog:
    delta_p: np.ndarray
    mean_residual: float
    valid_count: int


@dataclass
class SolveResult:
    warp: Homography
    converged: bool
    iterations_used: int
    log: list = field(default_factory=list)


def warp_jacobian_fields(height: int, width: int):
    """The two rows of the warp Jacobian tabulated over an H x W lattice.

    Returns (jx, jy), each (H, W, 8): jx[y, x] is dWx/dp at pixel (x, y)
    evaluated at p = 0, jy the dWy/dp row.
    """
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    zeros = np.zeros_like(xs)
    ones = np.ones_like(xs)
    jx = np.stack([xs, zeros, ys, zeros, ones, zeros, -xs * xs, -xs * ys], axis=-1)
    jy = np.stack([zeros, xs, zeros, ys, zeros, ones, -xs * ys, -ys * ys], axis=-1)
    return jx, jy


@dataclass
class TemplateSystem:
    """Everything precomputable from the template alone."""

    template: FeatureGrid
    sd: np.ndarray  # (C, H, W, 8) steepest-descent rows
    hessian: np.ndarray  # (8, 8)
    corners: np.ndarray  # (4, 2)

    @property
    def shape(self):
        return self.template.shape


def precompute_template(t: FeatureGrid) -> TemplateSystem:
    """Build the steepest-descent rows and Gauss-Newton Hessian for a template.

    sd[c, y, x] = gx[c, y, x] * jx[y, x] + gy[c, y, x] * jy[y, x]
    hessian     = sum over (c, y, x) of outer(sd, sd)
    """
    if t.height < 3 or t.width < 3:
        raise GridTooSmall(f"template must be at least 3x3, got {t.height}x{t.width}")
    d = t.data.astype(np.float64, copy=False)
    gy, gx = np.gradient(d, axis=(1, 2))
    jx, jy = warp_jacobian_fields(t.height, t.width)
    sd = gx[:, :, :, None] * jx[None] + gy[:, :, :, None] * jy[None]
    hessian = np.einsum("chwi,chwj->ij", sd, sd)
    return TemplateSystem(
        template=FeatureGrid(d),
        sd=np.ascontiguousarray(sd),
        hessian=hessian,
        corners=grid_corners(t.height, t.width),
    )


def _damped(hessian: np.ndarray, damping: float) -> np.ndarray:
    lam = damping * np.trace(hessian) / 8.0
    return hessian + lam * np.eye(8)


def _solve_normal_equations(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if not np.isfinite(a).all():
        raise SingularHessian("non-finite Hessian")
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] <= 0 or sv[-1] / sv[0] < _RCOND_FLOOR:
        raise SingularHessian(
            f"damped system is numerically singular (rcond {sv[-1] / max(sv[0], 1e-300):.2e}); "
            "template may lack texture"
        )
    return np.linalg.solve(a, rhs)


def iclk_step(sys: TemplateSystem, image: FeatureGrid, current: Homography, damping: float = 1e-12):
    """One Gauss-Newton increment at the current warp.

    Returns (delta: WarpParams, log: IterationLog).  The increment solves
    (H + lambda I) dp = sum over valid pixels of sd^T (I(W(x)) - T(x)).
    """
    rhs, abs_sum, count = _kernels.iclk_rhs(
        sys.template.data, sys.sd, image.data, current.m
    )
    if count == 0:
        raise SingularHessian("no template pixel lands inside the image under the current warp")
    a = _damped(sys.hessian, damping)
    dp = _solve_normal_equations(a, rhs)
    mean_residual = abs_sum / (count * sys.template.channels)
    return WarpParams(dp), IterationLog(dp, float(mean_residual), int(count))


def solve(
    template, image: FeatureGrid, init: Homography = None, cfg: SolverConfig = None
) -> SolveResult:
    """Run ICLK to convergence or the iteration cap.

    template may be a FeatureGrid (precomputed here) or a TemplateSystem
    (reused across many solves).  On SingularHessian the exception carries
    the per-iteration log accumulated so far in its .log attribute.
    """
    sys = template if isinstance(template, TemplateSystem) else precompute_template(template)
    cfg = cfg or SolverConfig()
    current = init or Homography.identity()
    log = []
    converged = False
    for _ in range(cfg.max_iterations):
        try:
            delta, entry = iclk_step(sys, image, current, cfg.hessian_damping)
        except SingularHessian as e:
            e.log = log
            raise
        current = update_inverse_compositional(current, delta)
        log.append(entry)
        if cfg.stop_kind == "delta_p":
            moved = corner_displacements(delta.to_homography(), sys.corners).max()
            if moved < cfg.delta_p_corner_epsilon:
                converged = True
                break
        else:
            if entry.mean_residual < cfg.residual_epsilon:
                converged = True
                break
    return SolveResult(
        warp=current, converged=converged, iterations_used=len(log), log=log
    )
