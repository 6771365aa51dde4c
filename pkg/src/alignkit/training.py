"""Corner/parameter losses and gradient training of learned extractors.

The training forward pass re-runs the inverse-compositional solver with every
operation recorded on an autodiff tape: the convolutional extractor on both
grids, the template gradient / steepest-descent / Hessian precomputation,
each executed ICLK iteration (warp, bilinear sample, masked residual, damped
8x8 solve, inverse composition), the stride conjugation back to full-pixel
coordinates, and the loss.  Reverse mode then yields exact gradients of the
recorded scalar with respect to every filter weight and bias.

The number of iterations actually executed and the per-iteration validity
masks are constants of the realized execution: backward differentiates the
arithmetic that ran, never the stop decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .errors import DivergenceDetected, GridTooSmall, SingularHessian
from .extractors import ConvStack
from .solver import warp_jacobian_fields
from .warp import Homography, WarpParams, apply_homography, corner_displacements, grid_corners

LOSS_KINDS = ("corner", "conditional_huber")


# ----------------------------------------------------------------------
# losses and metrics


def corner_loss(p_gt: Homography, p_est: Homography, corners) -> float:
    """Sum of squared distances between warped template corners."""
    corners = np.asarray(corners, dtype=np.float64).reshape(4, 2)
    d = apply_homography(p_est.m, corners) - apply_homography(p_gt.m, corners)
    return float((d * d).sum())


def corner_error_pct(p_gt: Homography, p_est: Homography, corners, width: float) -> float:
    """Mean corner distance as a percentage of the template width."""
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    corners = np.asarray(corners, dtype=np.float64).reshape(4, 2)
    d = apply_homography(p_est.m, corners) - apply_homography(p_gt.m, corners)
    return float(np.linalg.norm(d, axis=1).mean() / width * 100.0)


def conditional_huber_loss(p_gt: WarpParams, p_est: WarpParams, delta: float) -> float:
    """Componentwise Huber penalty of the parameter difference, summed."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    a = p_est.p - p_gt.p
    quad = np.abs(a) <= delta
    return float(np.where(quad, 0.5 * a * a, delta * (np.abs(a) - 0.5 * delta)).sum())


# ----------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 5
    learning_rate: float = 1e-3
    train_max_iters: int = 15
    validation_size: int = 20
    validation_interval: int = 50
    seed: int = 0
    loss_kind: str = "corner"
    huber_delta: float = 1.0
    delta_p_corner_epsilon: float = 0.01
    hessian_damping: float = 1e-12
    detach_hessian: bool = False
    clip_grad_norm: float | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.train_max_iters < 1:
            raise ValueError("train_max_iters must be at least 1")
        if self.validation_size < 1:
            raise ValueError("validation_size must be at least 1")
        if self.validation_interval < 1:
            raise ValueError("validation_interval must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.delta_p_corner_epsilon <= 0:
            raise ValueError("delta_p_corner_epsilon must be positive")
        if self.hessian_damping < 0:
            raise ValueError("hessian_damping must be nonnegative")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ValueError("clip_grad_norm must be positive when set")


# ----------------------------------------------------------------------
# recorded forward pass


@dataclass
class PairForward:
    """One pair's recorded pipeline: tape, scalar loss node, weight leaves."""

    tape: Tape
    loss: Node
    weight_nodes: list
    iterations: int
    est_warp: Homography  # template frame -> image content frame

    @property
    def loss_value(self) -> float:
        return float(self.loss.value)


def forward_pair(
    stack: ConvStack,
    pair,
    *,
    max_iters: int,
    stop_epsilon: float = 0.01,
    damping: float = 1e-12,
    loss_kind: str = "corner",
    huber_delta: float = 1.0,
    detach_hessian: bool = False,
) -> PairForward:
    """Record extractor + unrolled solver + loss for one alignment pair.

    The solve runs in feature coordinates starting from the pure translation
    that maps the template onto the unwarped patch position inside the padded
    image; the estimate is conjugated back to full-pixel coordinates and the
    loss is computed in the template's own frame against pair.gt_warp.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    stride = stack.total_stride
    patch = pair.patch_size
    pad = pair.pad

    tape = Tape()
    weight_nodes = [
        (tape.leaf(layer.weights, f"weights{i}"), tape.leaf(layer.bias, f"bias{i}"))
        for i, layer in enumerate(stack.layers)
    ]

    def run_stack(node):
        for (wn, bn), layer in zip(weight_nodes, stack.layers):
            node = tape.conv2d(node, wn, bn, layer.stride)
            if layer.activation == "relu":
                node = tape.relu(node)
        return node

    tfeat = run_stack(tape.leaf(pair.template.data, "template"))
    ifeat = run_stack(tape.leaf(pair.image.data, "image"))
    feat_h, feat_w = tfeat.value.shape[1:]
    if feat_h < 3 or feat_w < 3:
        raise GridTooSmall(
            f"feature template {feat_h}x{feat_w} too small to differentiate (need 3x3)"
        )

    jx, jy = warp_jacobian_fields(feat_h, feat_w)
    sd = tape.steepest_descent(
        tape.raster_gradient(tfeat, 2), tape.raster_gradient(tfeat, 1), jx, jy
    )
    hess = tape.gauss_newton_hessian(sd)
    if detach_hessian:
        damped_value = hess.value + (damping * np.trace(hess.value) / 8.0) * np.eye(8)
        system = tape.leaf(damped_value, "damped_hessian_detached")
    else:
        system = tape.damp(hess, damping)

    warp_node = tape.leaf(Homography.translation(pad / stride, pad / stride).m, "init_warp")
    feat_corners = grid_corners(feat_h, feat_w)
    iterations = 0
    for _ in range(max_iters):
        coords = tape.warp_lattice(warp_node, feat_h, feat_w)
        sampled, mask = tape.sample(ifeat, coords)
        if not mask.any():  # the estimate left the image: nothing to fit
            break
        residual = tape.masked_residual(sampled, tfeat, mask)
        rhs = tape.sd_rhs(sd, residual)
        dp = tape.solve8(system, rhs)
        delta = tape.delta_matrix(dp)
        warp_node = tape.normalize33(tape.matmul(warp_node, tape.inverse3(delta)))
        iterations += 1
        if corner_displacements(Homography(delta.value), feat_corners).max() < stop_epsilon:
            break

    # feature-frame estimate -> full pixels -> the template's own frame
    est_padded = tape.scale_conjugate(warp_node, float(stride))
    unpad = tape.leaf(Homography.translation(-pad, -pad).m, "unpad")
    est_patch = tape.matmul(unpad, est_padded)

    patch_corners = grid_corners(patch, patch)
    if loss_kind == "corner":
        targets = apply_homography(pair.gt_warp.m, patch_corners)
        loss = tape.squared_distance_sum(tape.warp_points(est_patch, patch_corners), targets)
    else:
        loss = tape.huber_sum(
            tape.params_from_matrix(est_patch), pair.gt_warp.params().p, huber_delta
        )

    return PairForward(tape, loss, weight_nodes, iterations, Homography(est_patch.value))


# ----------------------------------------------------------------------
# training loop


@dataclass
class StepRecord:
    step: int  # number of completed SGD updates after this step
    train_loss: float
    mean_iters: float
    val_loss: float | None = None


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    validations: list = field(default_factory=list)  # (completed updates, mean val loss)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            fp.write("# alignkit training history v1\n")
            fp.write("step,train_loss,val_loss,mean_iters\n")
            rows = {rec.step: rec for rec in self.records}
            for step, val in self.validations:
                if step not in rows:  # validation before any update at this count
                    fp.write(f"{step},,{val:.9g},\n")
            for rec in self.records:
                val = "" if rec.val_loss is None else f"{rec.val_loss:.9g}"
                fp.write(f"{rec.step},{rec.train_loss:.9g},{val},{rec.mean_iters:.9g}\n")


@dataclass
class TrainResult:
    best_stack: ConvStack
    last_stack: ConvStack
    history: TrainHistory
    best_val_loss: float
    best_after_step: int


def _forward_kwargs(cfg: TrainConfig, single_iteration: bool) -> dict:
    return dict(
        max_iters=1 if single_iteration else cfg.train_max_iters,
        stop_epsilon=cfg.delta_p_corner_epsilon,
        damping=cfg.hessian_damping,
        loss_kind=cfg.loss_kind,
        huber_delta=cfg.huber_delta,
        detach_hessian=cfg.detach_hessian,
    )


def validate(stack: ConvStack, pairs, **forward_kw) -> float:
    """Mean loss over a fixed batch; non-finite / unsolvable pairs give inf."""
    losses = []
    for pair in pairs:
        try:
            losses.append(forward_pair(stack, pair, **forward_kw).loss_value)
        except SingularHessian:
            losses.append(np.inf)
    return float(np.mean(losses))


def train(
    cfg: TrainConfig,
    generator,
    stack: ConvStack,
    *,
    single_iteration: bool = False,
    start_step: int = 0,
) -> TrainResult:
    """Plain SGD on the mean pair loss with periodic validation.

    `generator` supplies the data: `training_pair(step, index)` for the
    training stream and `validation_pair(index)` for the held-out batch,
    both pure functions of their arguments so runs (and resumes from
    `start_step`) are exactly reproducible.  The best-validation checkpoint
    is retained alongside the final weights.

    Gradients through the unrolled solver have heavy tails — a batch whose
    Hessian is nearly singular can spike the batch norm by 50x — so
    `cfg.clip_grad_norm` optionally rescales the batch-mean gradient to
    that global norm before the update.
    """
    stack = stack.copy()
    fw = _forward_kwargs(cfg, single_iteration)
    val_pairs = [generator.validation_pair(j) for j in range(cfg.validation_size)]
    history = TrainHistory()

    best_val = validate(stack, val_pairs, **fw)
    best_stack = stack.copy()
    best_after = start_step
    history.validations.append((start_step, best_val))

    end_step = start_step + cfg.steps
    for step in range(start_step, end_step):
        grads = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in stack.layers]
        losses = []
        iters = []
        failure = None
        for j in range(cfg.batch_size):
            pair = generator.training_pair(step, j)
            try:
                result = forward_pair(stack, pair, **fw)
            except SingularHessian as e:
                failure = f"singular system on pair (step {step}, index {j}): {e}"
                break
            losses.append(result.loss_value)
            iters.append(result.iterations)
            pair_grads = result.tape.backward(result.loss)
            for (wn, bn), (gw, gb) in zip(result.weight_nodes, grads):
                got_w = pair_grads.get(wn)
                if got_w is not None:
                    gw += got_w
                got_b = pair_grads.get(bn)
                if got_b is not None:
                    gb += got_b

        train_loss = np.inf if failure else float(np.mean(losses))
        mean_iters = float(np.mean(iters)) if iters else 0.0
        if not np.isfinite(train_loss):
            history.records.append(StepRecord(step + 1, train_loss, mean_iters))
            raise DivergenceDetected(
                failure or f"non-finite batch loss at step {step}",
                best_stack=best_stack,
                history=history,
            )

        scale = cfg.learning_rate / cfg.batch_size
        if cfg.clip_grad_norm is not None:
            # global L2 norm of the batch-mean gradient, clipped as one vector
            total = sum(float((g * g).sum()) for pair in grads for g in pair)
            norm = np.sqrt(total) / cfg.batch_size
            if norm > cfg.clip_grad_norm:
                scale *= cfg.clip_grad_norm / norm
        for layer, (gw, gb) in zip(stack.layers, grads):
            layer.weights -= scale * gw
            layer.bias -= scale * gb

        done = step + 1
        val_loss = None
        if done % cfg.validation_interval == 0 or done == end_step:
            val_loss = validate(stack, val_pairs, **fw)
            history.validations.append((done, val_loss))
            if val_loss < best_val:
                best_val = val_loss
                best_stack = stack.copy()
                best_after = done
        history.records.append(StepRecord(done, train_loss, mean_iters, val_loss))

    return TrainResult(best_stack, stack, history, best_val, best_after)


def train_single_iteration_mode(cfg: TrainConfig, generator, stack: ConvStack, **kw) -> TrainResult:
    """Identical to train() but every forward executes exactly one iteration."""
    return train(cfg, generator, stack, single_iteration=True, **kw)
