"""Homography warp parameterization and algebra.

The 8-parameter projective warp maps a template pixel (x, y) to

    W(x; p) = 1 / (1 + p7*x + p8*y) * ( (1+p1)*x + p3*y + p5,
                                        p2*x + (1+p4)*y + p6 )

equivalently the 3x3 matrix [[1+p1, p3, p5], [p2, 1+p4, p6], [p7, p8, 1]]
acting on homogeneous coordinates.  p = 0 is the identity.  All algebra here
runs in double precision; downstream solvers rely on that.

Coordinate convention: pixel (0, 0) is the center of the top-left sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, DegenerateWarp

# Absolute threshold below which denominators / determinants count as degenerate.
DEGENERACY_EPS = 1e-12


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class WarpParams:
    """The 8-vector p; p5, p6 are the pixel translations."""

    p: np.ndarray = field(default_factory=lambda: np.zeros(8))

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).reshape(8)
        object.__setattr__(self, "p", _freeze(p))

    @staticmethod
    def identity() -> "WarpParams":
        return WarpParams(np.zeros(8))

    @staticmethod
    def translation(dx: float, dy: float) -> "WarpParams":
        p = np.zeros(8)
        p[4] = dx
        p[5] = dy
        return WarpParams(p)

    def matrix(self) -> np.ndarray:
        p = self.p
        return np.array(
            [
                [1.0 + p[0], p[2], p[4]],
                [p[1], 1.0 + p[3], p[5]],
                [p[6], p[7], 1.0],
            ]
        )

    def to_homography(self) -> "Homography":
        return Homography(self.matrix())


@dataclass(frozen=True)
class Homography:
    """3x3 projective matrix, normalized so m[2,2] == 1 when representable."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        s = m[2, 2]
        if abs(s) < DEGENERACY_EPS:
            raise DegenerateWarp("homography has vanishing scale entry m[2,2]")
        object.__setattr__(self, "m", _freeze(m / s))

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))

    @staticmethod
    def translation(dx: float, dy: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = dx
        m[1, 2] = dy
        return Homography(m)

    def params(self) -> WarpParams:
        m = self.m
        return WarpParams(
            np.array(
                [m[0, 0] - 1.0, m[1, 0], m[0, 1], m[1, 1] - 1.0, m[0, 2], m[1, 2], m[2, 0], m[2, 1]]
            )
        )

    def inverse(self) -> "Homography":
        if abs(np.linalg.det(self.m)) < DEGENERACY_EPS:
            raise DegenerateWarp("homography is numerically singular")
        return Homography(np.linalg.inv(self.m))

    def compose(self, other: "Homography") -> "Homography":
        """Returns self applied after other: (self o other)(x) = self(other(x))."""
        return Homography(self.m @ other.m)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return apply_homography(self.m, pts)


def warp_point(p: WarpParams, x) -> np.ndarray:
    """Evaluate W(x; p) at a single point.

    Raises DegenerateWarp when the projective denominator underflows
    (the point maps to infinity).
    """
    x = np.asarray(x, dtype=np.float64).reshape(2)
    q = p.p
    den = 1.0 + q[6] * x[0] + q[7] * x[1]
    if abs(den) <= DEGENERACY_EPS:
        raise DegenerateWarp(f"denominator {den:g} at point {tuple(x)}")
    u = ((1.0 + q[0]) * x[0] + q[2] * x[1] + q[4]) / den
    v = (q[1] * x[0] + (1.0 + q[3]) * x[1] + q[5]) / den
    return np.array([u, v])


def apply_homography(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Warp an (N, 2) array of points by a 3x3 matrix."""
    m = np.asarray(m, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    hom = np.column_stack([pts, np.ones(len(pts))])
    out = hom @ m.T
    den = out[:, 2]
    if np.any(np.abs(den) <= DEGENERACY_EPS):
        raise DegenerateWarp("point mapped to infinity")
    res = out[:, :2] / den[:, None]
    return res[0] if single else res


def warp_jacobian(x) -> np.ndarray:
    """2x8 derivative of W(x; p) with respect to p, evaluated at p = 0.

    Column k is d W / d p_k in the ordering of WarpParams, so the matrix
    agrees with finite differences of warp_point:

        [[x, 0, y, 0, 1, 0, -x^2, -x*y],
         [0, x, 0, y, 0, 1, -x*y, -y^2]]
    """
    x = np.asarray(x, dtype=np.float64).reshape(2)
    u, v = x
    return np.array(
        [
            [u, 0.0, v, 0.0, 1.0, 0.0, -u * u, -u * v],
            [0.0, u, 0.0, v, 0.0, 1.0, -u * v, -v * v],
        ]
    )


def update_inverse_compositional(current: Homography, delta: WarpParams) -> Homography:
    """Compose an incremental warp inversely into the running estimate.

    Returns current @ matrix(delta)^-1, renormalized.
    """
    md = delta.matrix()
    if abs(np.linalg.det(md)) < DEGENERACY_EPS:
        raise DegenerateWarp("incremental warp is singular")
    return Homography(current.m @ np.linalg.inv(md))


def conjugate_by_scale(h: Homography, s: float) -> Homography:
    """Map a warp between coordinate frames that differ by isotropic scale s.

    Returns S @ H @ S^-1 with S = diag(s, s, 1).  Used to convert warps
    solved on a stride-s feature grid back to full-resolution coordinates
    (pass s) or the other way (pass 1/s).
    """
    if not s > 0:
        raise ValueError("scale must be positive")
    m = h.m.copy()
    out = m.copy()
    out[0, 2] *= s
    out[1, 2] *= s
    out[2, 0] /= s
    out[2, 1] /= s
    return Homography(out)


def _collinear(c: np.ndarray) -> bool:
    for i in range(4):
        idx = [j for j in range(4) if j != i]
        a, b, d = c[idx]
        area = (b[0] - a[0]) * (d[1] - a[1]) - (b[1] - a[1]) * (d[0] - a[0])
        if abs(area) < 1e-9:
            return True
    return False


def homography_from_corner_offsets(src_corners, dst_corners) -> Homography:
    """Exact 4-point homography (direct linear transform, 8x8 solve).

    Corner order convention throughout the package: top-left, top-right,
    bottom-right, bottom-left.
    """
    src = np.asarray(src_corners, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst_corners, dtype=np.float64).reshape(4, 2)
    if _collinear(src) or _collinear(dst):
        raise DegenerateConfiguration("three corners collinear")
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        u, v = dst[i]
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as e:
        raise DegenerateConfiguration(str(e)) from e
    m = np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    hom = Homography(m)
    resid = np.abs(hom.apply(src) - dst).max()
    if not np.isfinite(resid) or resid > 1e-8:
        raise DegenerateConfiguration(f"reprojection residual {resid:g} px")
    return hom


def corner_displacements(h: Homography, corners: np.ndarray) -> np.ndarray:
    """Per-corner Euclidean displacement between h(corner) and corner."""
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 2)
    return np.linalg.norm(h.apply(corners) - corners, axis=1)


def grid_corners(height: int, width: int) -> np.ndarray:
    """The 4 corners of an H x W grid in TL, TR, BR, BL order."""
    w, h = width - 1.0, height - 1.0
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
