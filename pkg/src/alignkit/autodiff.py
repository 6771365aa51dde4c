"""Tape-based reverse-mode differentiation for the unrolled alignment pipeline.

This is a deliberately small autodiff engine: just the operations the
training forward pass needs — convolution, rectifier, raster gradients,
steepest-descent assembly, the damped 8x8 solve, 3x3 warp algebra, bilinear
sampling, and the corner loss.  Values are float64 numpy arrays throughout.

Every operation records a Node holding its value, its parent nodes, a vjp
closure (vector-Jacobian product: output gradient -> per-parent gradients),
and a recompute closure so the whole tape can be replayed forward.  Replay
repeats the identical arithmetic, so it reproduces the recorded loss
bit-exactly; backward walks the tape once in reverse creation order, so each
node's vjp runs exactly once.

Iteration-count and validity-mask decisions made during the forward pass are
captured as constants of the realized execution: the tape differentiates the
arithmetic that actually ran, not the control flow.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import IncompleteTape, SingularHessian

_RCOND_FLOOR = 1e-12


class Node:
    """One recorded value in a Tape."""

    __slots__ = ("value", "parents", "vjp", "recompute", "name", "index", "visits")

    def __init__(self, value, parents, vjp, recompute, name, index):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.recompute = recompute
        self.name = name
        self.index = index
        self.visits = 0

    def __repr__(self):
        return f"Node({self.name}#{self.index}, shape={np.shape(self.value)})"


class Tape:
    """Records a forward pass; replays it and runs reverse-mode backward."""

    def __init__(self):
        self.nodes = []

    def _record(self, value, parents, vjp, recompute, name):
        node = Node(np.asarray(value), tuple(parents), vjp, recompute, name, len(self.nodes))
        self.nodes.append(node)
        return node

    def leaf(self, value, name="leaf"):
        """A differentiable input (weights, biases, raw grids)."""
        value = np.asarray(value, dtype=np.float64)
        return self._record(value, (), None, None, name)

    def replay(self):
        """Recompute every node forward; returns the final node's value.

        Leaves keep their recorded values.  The arithmetic is identical to
        the original forward pass, so the result is bit-exact.
        """
        if not self.nodes:
            raise IncompleteTape("empty tape")
        vals = {}
        for node in self.nodes:
            if node.recompute is None:
                vals[node] = node.value
            else:
                vals[node] = node.recompute(*(vals[p] for p in node.parents))
        return vals[self.nodes[-1]]

    def backward(self, loss: Node, seed=1.0):
        """Reverse-mode sweep from a scalar node; returns {node: gradient}.

        Every node at or below `loss` that influences it has its vjp invoked
        exactly once.  Gradients for all reached nodes (leaves included) are
        in the returned dict.
        """
        if loss.index >= len(self.nodes) or self.nodes[loss.index] is not loss:
            raise IncompleteTape("loss node does not belong to this tape")
        if np.shape(loss.value) != ():
            raise IncompleteTape(f"loss must be scalar, got shape {np.shape(loss.value)}")
        grads = {loss: np.float64(seed)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.get(node)
            if g is None or node.vjp is None:
                continue
            node.visits += 1
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                acc = grads.get(parent)
                grads[parent] = pg if acc is None else acc + pg
        return grads

    # ------------------------------------------------------------------
    # elementwise / conv ops

    def conv2d(self, x: Node, w: Node, b: Node, stride: int) -> Node:
        hin, win = x.value.shape[1:]
        k = w.value.shape[2]

        def fwd(xv, wv, bv):
            return _kernels.conv2d_forward(xv, wv, bv, stride)

        value = fwd(x.value, w.value, b.value)

        def vjp(g):
            g = np.ascontiguousarray(g)
            gx = _kernels.conv2d_bwd_input(g, w.value, stride, hin, win)
            gw = _kernels.conv2d_bwd_weights(x.value, g, k, stride)
            gb = g.sum(axis=(1, 2))
            return gx, gw, gb

        return self._record(value, (x, w, b), vjp, fwd, "conv2d")

    def relu(self, x: Node) -> Node:
        def fwd(xv):
            return np.maximum(xv, 0.0)

        # subgradient at exactly 0 is 0, hence the strict inequality
        active = x.value > 0.0

        def vjp(g):
            return (g * active,)

        return self._record(fwd(x.value), (x,), vjp, fwd, "relu")

    # ------------------------------------------------------------------
    # template-system ops

    def raster_gradient(self, x: Node, axis: int) -> Node:
        """np.gradient along a spatial axis of a (C, H, W) node (axis 1 or 2)."""
        if x.value.shape[axis] < 3:
            raise IncompleteTape("raster_gradient needs at least 3 samples along the axis")

        def fwd(xv):
            return np.gradient(xv, axis=axis)

        def vjp(g):
            gm = np.moveaxis(g, axis, -1)
            out = np.zeros_like(gm)
            half = 0.5 * gm[..., 1:-1]
            out[..., 2:] += half
            out[..., :-2] -= half
            out[..., 1] += gm[..., 0]
            out[..., 0] -= gm[..., 0]
            out[..., -1] += gm[..., -1]
            out[..., -2] -= gm[..., -1]
            return (np.moveaxis(out, -1, axis),)

        return self._record(fwd(x.value), (x,), vjp, fwd, f"grad_axis{axis}")

    def steepest_descent(self, gx: Node, gy: Node, jx: np.ndarray, jy: np.ndarray) -> Node:
        """sd[c,y,x,:] = gx[c,y,x]*jx[y,x,:] + gy[c,y,x]*jy[y,x,:]."""

        def fwd(gxv, gyv):
            return gxv[:, :, :, None] * jx[None] + gyv[:, :, :, None] * jy[None]

        def vjp(g):
            return (g * jx[None]).sum(axis=-1), (g * jy[None]).sum(axis=-1)

        return self._record(fwd(gx.value, gy.value), (gx, gy), vjp, fwd, "steepest_descent")

    def gauss_newton_hessian(self, sd: Node) -> Node:
        def fwd(sdv):
            return np.einsum("chwi,chwj->ij", sdv, sdv)

        def vjp(g):
            return (np.einsum("ij,chwj->chwi", g + g.T, sd.value),)

        return self._record(fwd(sd.value), (sd,), vjp, fwd, "hessian")

    def damp(self, h: Node, alpha: float) -> Node:
        eye = np.eye(8)

        def fwd(hv):
            return hv + (alpha * np.trace(hv) / 8.0) * eye

        def vjp(g):
            return (g + (alpha / 8.0) * np.trace(g) * eye,)

        return self._record(fwd(h.value), (h,), vjp, fwd, "damp")

    def solve8(self, a: Node, rhs: Node) -> Node:
        """dp = A^-1 rhs with the solver's singularity guard."""

        def fwd(av, rhsv):
            if not np.isfinite(av).all():
                raise SingularHessian("non-finite system matrix")
            sv = np.linalg.svd(av, compute_uv=False)
            if sv[0] <= 0 or sv[-1] / sv[0] < _RCOND_FLOOR:
                raise SingularHessian("damped system is numerically singular")
            return np.linalg.solve(av, rhsv)

        dp = fwd(a.value, rhs.value)

        def vjp(g):
            z = np.linalg.solve(a.value.T, g)
            return -np.outer(z, dp), z

        return self._record(dp, (a, rhs), vjp, fwd, "solve8")

    # ------------------------------------------------------------------
    # 3x3 warp-matrix ops

    def delta_matrix(self, dp: Node) -> Node:
        def fwd(d):
            return np.array(
                [
                    [1.0 + d[0], d[2], d[4]],
                    [d[1], 1.0 + d[3], d[5]],
                    [d[6], d[7], 1.0],
                ]
            )

        def vjp(g):
            return (
                np.array(
                    [g[0, 0], g[1, 0], g[0, 1], g[1, 1], g[0, 2], g[1, 2], g[2, 0], g[2, 1]]
                ),
            )

        return self._record(fwd(dp.value), (dp,), vjp, fwd, "delta_matrix")

    def inverse3(self, m: Node) -> Node:
        def fwd(mv):
            return np.linalg.inv(mv)

        y = fwd(m.value)

        def vjp(g):
            return (-(y.T @ g @ y.T),)

        return self._record(y, (m,), vjp, fwd, "inverse3")

    def matmul(self, a: Node, b: Node) -> Node:
        def fwd(av, bv):
            return av @ bv

        def vjp(g):
            return g @ b.value.T, a.value.T @ g

        return self._record(fwd(a.value, b.value), (a, b), vjp, fwd, "matmul")

    def normalize33(self, m: Node) -> Node:
        def fwd(mv):
            return mv / mv[2, 2]

        y = fwd(m.value)
        m22 = m.value[2, 2]

        def vjp(g):
            gm = g / m22
            gm[2, 2] -= (g * y).sum() / m22
            return (gm,)

        return self._record(y, (m,), vjp, fwd, "normalize33")

    def scale_conjugate(self, m: Node, s: float) -> Node:
        """S M S^-1 with S = diag(s, s, 1): entrywise constant scaling."""
        c = np.array([[1.0, 1.0, s], [1.0, 1.0, s], [1.0 / s, 1.0 / s, 1.0]])

        def fwd(mv):
            return mv * c

        def vjp(g):
            return (g * c,)

        return self._record(fwd(m.value), (m,), vjp, fwd, "scale_conjugate")

    # ------------------------------------------------------------------
    # warping / sampling ops

    def warp_lattice(self, m: Node, height: int, width: int) -> Node:
        """Homography-warped coordinates of an H x W pixel lattice, stacked
        as a (2, H, W) node (x coordinates first)."""
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)

        def fwd(mv):
            xw, yw = _kernels.warp_coords(mv, height, width)
            return np.stack([xw, yw])

        value = fwd(m.value)

        def vjp(g):
            mv = m.value
            den = mv[2, 0] * xs + mv[2, 1] * ys + mv[2, 2]
            g0 = g[0] / den
            g1 = g[1] / den
            g2 = -(g[0] * value[0] + g[1] * value[1]) / den
            gm = np.empty((3, 3))
            for row, gr in enumerate((g0, g1, g2)):
                gm[row, 0] = (gr * xs).sum()
                gm[row, 1] = (gr * ys).sum()
                gm[row, 2] = gr.sum()
            return (gm,)

        return self._record(value, (m,), vjp, fwd, "warp_lattice")

    def sample(self, img: Node, coords: Node):
        """Bilinear-sample img at a (2, H, W) coordinate node.

        Returns (node (C, H, W), valid mask (H, W)).  The mask is a constant
        of the realized execution; out-of-bounds samples are zero and pass
        no gradient.
        """
        c = img.value.shape[0]
        h, w = coords.value.shape[1:]

        def fwd(imgv, coordsv):
            vals, _ = _kernels.bilinear_sample_points(
                imgv, coordsv[0].ravel(), coordsv[1].ravel()
            )
            return vals.reshape(c, h, w)

        xs = coords.value[0].ravel()
        ys = coords.value[1].ravel()
        _, inb = _kernels.bilinear_sample_points(img.value, xs, ys)

        def vjp(g):
            gflat = np.ascontiguousarray(g.reshape(c, -1))
            gimg = _kernels.bilinear_scatter_add(
                gflat, xs, ys, inb, img.value.shape[1], img.value.shape[2]
            )
            gxs, gys = _kernels.bilinear_coord_grad(img.value, xs, ys, inb, gflat)
            gcoords = np.stack([gxs.reshape(h, w), gys.reshape(h, w)])
            return gimg, gcoords

        node = self._record(fwd(img.value, coords.value), (img, coords), vjp, fwd, "sample")
        return node, inb.reshape(h, w)

    def masked_residual(self, sampled: Node, template: Node, mask: np.ndarray) -> Node:
        """(sampled - template) zeroed outside the validity mask."""
        m = mask[None].astype(np.float64)

        def fwd(sv, tv):
            return (sv - tv) * m

        def vjp(g):
            gm = g * m
            return gm, -gm

        return self._record(fwd(sampled.value, template.value), (sampled, template), vjp, fwd, "residual")

    def sd_rhs(self, sd: Node, r: Node) -> Node:
        """rhs_k = sum over (c, y, x) of sd[c,y,x,k] * r[c,y,x]."""

        def fwd(sdv, rv):
            return np.einsum("chwk,chw->k", sdv, rv)

        def vjp(g):
            return r.value[:, :, :, None] * g, (sd.value * g).sum(axis=-1)

        return self._record(fwd(sd.value, r.value), (sd, r), vjp, fwd, "sd_rhs")

    def warp_points(self, m: Node, pts: np.ndarray) -> Node:
        """Apply a 3x3 matrix node to constant (N, 2) points -> (N, 2) node."""
        hom = np.column_stack([pts, np.ones(len(pts))])

        def fwd(mv):
            q = hom @ mv.T
            return q[:, :2] / q[:, 2:]

        q = hom @ m.value.T
        value = q[:, :2] / q[:, 2:]

        def vjp(g):
            wv = q[:, 2]
            d0 = g[:, 0] / wv
            d1 = g[:, 1] / wv
            d2 = -(g[:, 0] * value[:, 0] + g[:, 1] * value[:, 1]) / wv
            return (np.einsum("ni,nj->ij", np.column_stack([d0, d1, d2]), hom),)

        return self._record(value, (m,), vjp, fwd, "warp_points")

    def params_from_matrix(self, m: Node) -> Node:
        """Extract the 8 warp parameters from a normalized 3x3 matrix."""

        def fwd(mv):
            return np.array(
                [
                    mv[0, 0] - 1.0,
                    mv[1, 0],
                    mv[0, 1],
                    mv[1, 1] - 1.0,
                    mv[0, 2],
                    mv[1, 2],
                    mv[2, 0],
                    mv[2, 1],
                ]
            )

        def vjp(g):
            gm = np.zeros((3, 3))
            gm[0, 0] = g[0]
            gm[1, 0] = g[1]
            gm[0, 1] = g[2]
            gm[1, 1] = g[3]
            gm[0, 2] = g[4]
            gm[1, 2] = g[5]
            gm[2, 0] = g[6]
            gm[2, 1] = g[7]
            return (gm,)

        return self._record(fwd(m.value), (m,), vjp, fwd, "params_from_matrix")

    def huber_sum(self, p: Node, target: np.ndarray, delta: float) -> Node:
        """Componentwise Huber penalty of (p - target), summed to a scalar."""

        def fwd(pv):
            a = pv - target
            quad = np.abs(a) <= delta
            return float(
                np.where(quad, 0.5 * a * a, delta * (np.abs(a) - 0.5 * delta)).sum()
            )

        a0 = p.value - target
        psi = np.where(np.abs(a0) <= delta, a0, delta * np.sign(a0))

        def vjp(g):
            return (g * psi,)

        return self._record(fwd(p.value), (p,), vjp, fwd, "huber_sum")

    def squared_distance_sum(self, p: Node, target: np.ndarray) -> Node:
        """Scalar sum of squared coordinate differences to constant targets."""

        def fwd(pv):
            return ((pv - target) ** 2).sum()

        def vjp(g):
            return (2.0 * g * (p.value - target),)

        return self._record(fwd(p.value), (p,), vjp, fwd, "squared_distance_sum")

    def add(self, a: Node, b: Node) -> Node:
        def fwd(av, bv):
            return av + bv

        def vjp(g):
            return g, g

        return self._record(fwd(a.value, b.value), (a, b), vjp, fwd, "add")

    def scale(self, a: Node, factor: float) -> Node:
        def fwd(av):
            return av * factor

        def vjp(g):
            return (g * factor,)

        return self._record(fwd(a.value), (a,), vjp, fwd, "scale")
