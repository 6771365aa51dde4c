"""Command-line harness: align single pairs, run batch evaluations, train
extractors, tabulate corner-error CDFs, and dump synthetic pair sets.

Exit codes are shared by every subcommand: 0 for a completed, converged run;
2 for a run that completed but did not converge (alignment hit its iteration
cap, training diverged); 1 for any input, format, or usage error.

Output CSVs are versioned with a leading comment line and print every float
with 9 significant digits, so reruns can be compared byte for byte.  Wall
times are nondeterministic and therefore only recorded under --timing.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .datagen import (
    PairConfig,
    PhotometricConfig,
    SourcePairGenerator,
    SourceSet,
    dump_pairs,
    sample_pair,
)
from .errors import AlignkitError, DivergenceDetected, FormatError
from .extractors import ExtractorSpec, extract, init_conv_stack, load_stack, save_stack
from .grid import FeatureGrid
from .solver import SolverConfig, solve
from .tensorio import load_fgt1, load_image
from .training import TrainConfig, corner_error_pct, train
from .warp import Homography, conjugate_by_scale, grid_corners


def _g(v) -> str:
    """The one float format every CSV and printed matrix uses."""
    return f"{float(v):.9g}"


# ----------------------------------------------------------------------
# shared flag groups


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-iterations", type=int, default=50, metavar="N")
    p.add_argument(
        "--stop-kind", choices=("delta_p", "residual"), default="delta_p",
        help="stop when the increment moves no corner more than EPS pixels, "
        "or when the mean absolute residual drops below --residual-epsilon",
    )
    p.add_argument("--epsilon", type=float, default=0.01, metavar="EPS",
                   help="corner-motion stopping threshold in pixels (default 0.01)")
    p.add_argument("--residual-epsilon", type=float, default=1e-3, metavar="EPS")
    p.add_argument("--damping", type=float, default=1e-12, metavar="ALPHA",
                   help="Tikhonov coefficient: lambda = ALPHA * trace(H)/8")


def _solver_config(args) -> SolverConfig:
    return SolverConfig(
        max_iterations=args.max_iterations,
        stop_kind=args.stop_kind,
        delta_p_corner_epsilon=args.epsilon,
        residual_epsilon=args.residual_epsilon,
        hessian_damping=args.damping,
    )


def _add_pair_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patch-min", type=int, default=175, metavar="PX")
    p.add_argument("--patch-max", type=int, default=300, metavar="PX")
    p.add_argument("--bound", type=float, default=30.0, metavar="PCT",
                   help="largest no-op corner error a generated warp may have "
                   "(percent of patch width, default 30)")
    p.add_argument("--pad-factor", type=float, default=0.35, metavar="F")
    p.add_argument(
        "--jitter", default=None, metavar="G,B,C,LG,N,S",
        help="extra image-side photometric jitter per pair: six comma-separated "
        "magnitudes gain,bias,channel_gain,log_gamma,noise_sigma,shading",
    )


def _pair_config(args) -> PairConfig:
    jitter = None
    if args.jitter is not None:
        vals = args.jitter.split(",")
        if len(vals) != 6:
            raise FormatError(f"--jitter needs 6 comma-separated values, got {len(vals)}")
        jitter = PhotometricConfig(*[float(v) for v in vals])
    return PairConfig(args.patch_min, args.patch_max, args.bound, args.pad_factor, jitter)


def _eval_region(src: SourceSet) -> str:
    """Evaluation draws from the held-out region when the manifest has one."""
    return "test" if src.test_fraction > 0 else "train"


# ----------------------------------------------------------------------
# align


def _load_grid(path: str, mode: str) -> FeatureGrid:
    if str(path).endswith(".fgt1"):
        return FeatureGrid(load_fgt1(path))
    return FeatureGrid(load_image(path, mode=mode))


def _extractor_from_name(name: str) -> ExtractorSpec:
    if name in ("identity", "raw"):
        return ExtractorSpec.identity()
    if name in ("normalize", "normalized"):
        return ExtractorSpec.normalized()
    if name.startswith("stack:"):
        stack, _ = load_stack(name[len("stack:"):])
        return ExtractorSpec.conv(stack)
    raise FormatError(
        f"unknown extractor {name!r}; expected raw/identity, normalize, or stack:PATH"
    )


def cmd_align(args) -> int:
    template = _load_grid(args.template, args.mode)
    image = _load_grid(args.image, args.mode)

    external = (args.template_features, args.image_features)
    if any(external):
        if not all(external) or args.feature_stride is None:
            raise FormatError(
                "external features need --template-features, --image-features, "
                "and --feature-stride together"
            )
        tfeat, stride = extract(
            ExtractorSpec.external(args.template_features, args.feature_stride), template
        )
        ifeat, _ = extract(
            ExtractorSpec.external(args.image_features, args.feature_stride), image
        )
    else:
        spec = _extractor_from_name(args.extractor)
        tfeat, stride = extract(spec, template)
        ifeat, _ = extract(spec, image)

    result = solve(tfeat, ifeat, None, _solver_config(args))
    full = conjugate_by_scale(result.warp, float(stride))
    for row in full.m:
        print(" ".join(_g(v) for v in row))
    print(
        f"iterations {result.iterations_used} "
        f"converged {'yes' if result.converged else 'no'} stride {stride}",
        file=sys.stderr,
    )
    return 0 if result.converged else 2


# ----------------------------------------------------------------------
# evaluate


@dataclass
class EvalRecord:
    pair: int
    method: str
    corner_error_pct: float
    converged: bool
    iterations: int
    wall_ms: float


def _run_method(pair, spec: ExtractorSpec, cfg: SolverConfig):
    """Solve one pair under one extractor; error is measured in the
    template's own frame after stride conjugation and unpadding."""
    tfeat, stride = extract(spec, pair.template)
    ifeat, _ = extract(spec, pair.image)
    init = Homography.translation(pair.pad / stride, pair.pad / stride)
    result = solve(tfeat, ifeat, init, cfg)
    est = conjugate_by_scale(result.warp, float(stride))
    est = Homography.translation(-pair.pad, -pair.pad).compose(est)
    corners = grid_corners(pair.patch_size, pair.patch_size)
    err = corner_error_pct(pair.gt_warp, est, corners, pair.patch_size)
    return err, result.converged, result.iterations_used


# Worker state is a module global so forked pool workers inherit it for free;
# pairs are regenerated in the worker from their seed key rather than shipped.
_EVAL_STATE = None


def _eval_one(index: int) -> list:
    src, pair_cfg, seed, region, methods, solver_cfg = _EVAL_STATE
    pair = sample_pair(src, pair_cfg, np.random.SeedSequence((seed, 3, index)), region=region)
    records = [EvalRecord(index, "noop", pair.noop_error_pct(), True, 0, 0.0)]
    for name, spec in methods:
        start = time.perf_counter()
        try:
            err, converged, iters = _run_method(pair, spec, solver_cfg)
        except AlignkitError:
            err, converged, iters = float("inf"), False, 0
        ms = (time.perf_counter() - start) * 1e3
        records.append(EvalRecord(index, name, err, converged, iters, ms))
    return records


_SUMMARY_THRESHOLDS = (1.0, 3.0, 5.0, 10.0)


def _print_summary(records) -> None:
    methods = list(dict.fromkeys(r.method for r in records))
    for m in methods:
        errs = np.array([r.corner_error_pct for r in records if r.method == m])
        fracs = "  ".join(
            f"<={_g(t)}% {np.mean(errs <= t):.3f}" for t in _SUMMARY_THRESHOLDS
        )
        print(f"{m:<12} {fracs}  n={len(errs)}")


def cmd_evaluate(args) -> int:
    global _EVAL_STATE
    src = SourceSet.from_manifest(args.manifest)
    methods = []
    for name in dict.fromkeys(m for m in args.methods.split(",") if m):
        if name == "noop":
            continue  # always included
        methods.append((name, _extractor_from_name(name)))

    _EVAL_STATE = (
        src, _pair_config(args), args.seed, _eval_region(src), methods, _solver_config(args),
    )
    try:
        if args.jobs > 1 and hasattr(os, "fork"):
            import multiprocessing
            from concurrent.futures import ProcessPoolExecutor

            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(args.jobs, mp_context=ctx) as pool:
                batches = list(pool.map(_eval_one, range(args.pairs)))
        else:
            batches = [_eval_one(i) for i in range(args.pairs)]
    finally:
        _EVAL_STATE = None

    records = [r for batch in batches for r in batch]
    records.sort(key=lambda r: r.pair)  # stable: method order within a pair survives

    with open(args.out, "w", encoding="utf-8") as fp:
        fp.write("# alignkit eval v1\n")
        fp.write("pair,method,corner_error_pct,converged,iterations")
        fp.write(",wall_ms\n" if args.timing else "\n")
        for r in records:
            row = f"{r.pair},{r.method},{_g(r.corner_error_pct)},{int(r.converged)},{r.iterations}"
            if args.timing:
                row += f",{_g(r.wall_ms)}"
            fp.write(row + "\n")
    _print_summary(records)
    return 0


# ----------------------------------------------------------------------
# cdf


def _read_eval_csv(path):
    """Returns (method names in first-appearance order, {method: errors})."""
    header = None
    order = []
    by_method = {}
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, raw in enumerate(fp, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if header is None:
                header = parts
                try:
                    mi = header.index("method")
                    ei = header.index("corner_error_pct")
                except ValueError as e:
                    raise FormatError(f"{path}:{lineno}: not an eval CSV header") from e
                continue
            if len(parts) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} columns")
            try:
                err = float(parts[ei])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: bad corner_error_pct") from e
            if err < 0:
                raise FormatError(f"{path}:{lineno}: negative corner error")
            method = parts[mi]
            if method not in by_method:
                order.append(method)
                by_method[method] = []
            by_method[method].append(err)
    if header is None:
        raise FormatError(f"{path}: no header row")
    return order, by_method


def cmd_cdf(args) -> int:
    order, by_method = _read_eval_csv(args.eval_csv)
    sorted_errs = {m: np.sort(np.asarray(v)) for m, v in by_method.items()}
    thresholds = [i / 4 for i in range(121)]  # 0 .. 30 in 0.25 steps
    with open(args.out, "w", encoding="utf-8") as fp:
        fp.write("# alignkit cdf v1\n")
        fp.write(",".join(["threshold_pct"] + order) + "\n")
        last = {m: -1.0 for m in order}
        for t in thresholds:
            cells = [_g(t)]
            for m in order:
                errs = sorted_errs[m]
                frac = np.searchsorted(errs, t, side="right") / len(errs)
                assert frac >= last[m], f"CDF not monotone for {m}"
                last[m] = frac
                cells.append(_g(frac))
            fp.write(",".join(cells) + "\n")
    return 0


# ----------------------------------------------------------------------
# train


_TRAIN_INT_KEYS = (
    "steps", "batch_size", "train_max_iters", "validation_size",
    "validation_interval", "seed",
)
_TRAIN_FLOAT_KEYS = (
    "learning_rate", "huber_delta", "delta_p_corner_epsilon", "hessian_damping",
    "clip_grad_norm",
)
_PAIR_INT_KEYS = ("patch_min", "patch_max")
_PAIR_FLOAT_KEYS = ("max_noop_error_pct", "pad_factor")
_PHOTO_KEYS = (
    "photometric_gain", "photometric_bias", "photometric_channel_gain",
    "photometric_log_gamma", "photometric_noise_sigma", "photometric_shading",
)
_STACK_LIST_KEYS = ("channels", "kernels", "strides")


def _parse_train_config(path):
    """Key-value text: one 'key value' per line, '#' comments.

    Recognized keys (defaults in parentheses):
      training   steps (required), batch_size (5), learning_rate (1e-3),
                 train_max_iters (15), validation_size (20),
                 validation_interval (50), seed (0), loss_kind (corner),
                 huber_delta (1.0), delta_p_corner_epsilon (0.01),
                 hessian_damping (1e-12), detach_hessian (false),
                 clip_grad_norm (off)
      pairs      patch_min (175), patch_max (300), max_noop_error_pct (30),
                 pad_factor (0.35), photometric_* (all 0; setting any turns
                 per-pair image-side jitter on)
      extractor  channels (1,8,8), kernels (3,3), strides (1,2), init_seed (0)
    """
    raw = {}
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            key, _, value = text.partition(" ")
            value = value.strip()
            if not value:
                raise FormatError(f"{path}:{lineno}: key {key!r} without a value")
            if key in raw:
                raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value

    def take(key, default=None):
        return raw.pop(key, default)

    try:
        train_kw = {}
        if "steps" not in raw:
            raise FormatError(f"{path}: missing required key 'steps'")
        for k in _TRAIN_INT_KEYS:
            if k in raw:
                train_kw[k] = int(take(k))
        for k in _TRAIN_FLOAT_KEYS:
            if k in raw:
                train_kw[k] = float(take(k))
        if "loss_kind" in raw:
            train_kw["loss_kind"] = take("loss_kind")
        if "detach_hessian" in raw:
            v = take("detach_hessian").lower()
            if v not in ("0", "1", "true", "false"):
                raise FormatError(f"{path}: detach_hessian must be a boolean, got {v!r}")
            train_kw["detach_hessian"] = v in ("1", "true")
        train_cfg = TrainConfig(**train_kw)

        pair_kw = {}
        for k in _PAIR_INT_KEYS:
            if k in raw:
                pair_kw[k] = int(take(k))
        for k in _PAIR_FLOAT_KEYS:
            if k in raw:
                pair_kw[k] = float(take(k))
        photo = {k: float(take(k)) for k in _PHOTO_KEYS if k in raw}
        if photo:
            pair_kw["photometric"] = PhotometricConfig(
                **{k[len("photometric_"):]: v for k, v in photo.items()}
            )
        pair_cfg = PairConfig(**pair_kw)

        shape = {}
        for k in _STACK_LIST_KEYS:
            text = take(k, {"channels": "1,8,8", "kernels": "3,3", "strides": "1,2"}[k])
            shape[k] = tuple(int(v) for v in text.split(","))
        init_seed = int(take("init_seed", 0))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    if raw:
        raise FormatError(f"{path}: unknown keys {sorted(raw)}")
    return train_cfg, pair_cfg, shape, init_seed


def cmd_train(args) -> int:
    train_cfg, pair_cfg, shape, init_seed = _parse_train_config(args.config)
    src = SourceSet.from_manifest(args.manifest)
    if src.test_fraction <= 0:
        raise FormatError(
            f"{args.manifest}: training needs a held-out region; add 'split <fraction>'"
        )
    generator = SourcePairGenerator(src, pair_cfg, train_cfg.seed)

    if args.resume:
        stack, extra = load_stack(args.resume)
        if "completed_steps" not in extra:
            raise FormatError(f"{args.resume}: not a resumable checkpoint (no completed_steps)")
        start_step = int(extra["completed_steps"])
    else:
        stack = init_conv_stack(shape["channels"], shape["kernels"], shape["strides"], init_seed)
        start_step = 0

    history_path = args.out + ".history.csv"
    try:
        result = train(
            train_cfg, generator, stack,
            single_iteration=args.single_iteration, start_step=start_step,
        )
    except DivergenceDetected as e:
        e.history.to_csv(history_path)
        save_stack(args.out, e.best_stack, extra={"seed": train_cfg.seed})
        print(f"training diverged: {e}", file=sys.stderr)
        print(f"best checkpoint and partial history kept at {args.out}", file=sys.stderr)
        return 2

    result.history.to_csv(history_path)
    save_stack(
        args.out, result.best_stack,
        extra={
            "seed": train_cfg.seed,
            "best_after_step": result.best_after_step,
            "best_val_loss": _g(result.best_val_loss),
        },
    )
    save_stack(
        args.out + ".last", result.last_stack,
        extra={"seed": train_cfg.seed, "completed_steps": start_step + train_cfg.steps},
    )
    print(
        f"{train_cfg.steps} steps from step {start_step}: "
        f"best validation loss {_g(result.best_val_loss)} "
        f"after step {result.best_after_step}"
    )
    print(f"wrote {args.out}, {args.out}.last, {history_path}")
    return 0


# ----------------------------------------------------------------------
# dump-pairs


def cmd_dump_pairs(args) -> int:
    src = SourceSet.from_manifest(args.manifest)
    pair_cfg = _pair_config(args)
    region = _eval_region(src)
    pairs = [
        sample_pair(src, pair_cfg, np.random.SeedSequence((args.seed, 3, i)), region=region)
        for i in range(args.count)
    ]
    dump_pairs(pairs, args.out_dir)
    print(f"wrote {len(pairs)} {region}-region pairs to {args.out_dir}")
    return 0


# ----------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1; exit 2 is reserved for unconverged-but-completed runs."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="alignkit",
        description="Dense image alignment: solve, evaluate, and train.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "align", help="align one template/image pair and print the homography",
        description="Prints the 3x3 homography mapping template pixels to image "
        "pixels (stride-conjugated back to full resolution when the extractor "
        "downsamples).  Inputs are PNG/JPEG images or .fgt1 tensors.",
    )
    p.add_argument("template")
    p.add_argument("image")
    p.add_argument("--mode", choices=("gray", "rgb"), default="gray")
    p.add_argument("--extractor", default="identity", metavar="SPEC",
                   help="identity, normalize, or stack:PATH (default identity)")
    p.add_argument("--template-features", metavar="FGT1",
                   help="precomputed template feature map (with --image-features)")
    p.add_argument("--image-features", metavar="FGT1")
    p.add_argument("--feature-stride", type=int, metavar="N",
                   help="spatial stride the external feature maps were computed at")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser(
        "evaluate", help="batch-evaluate methods on generated pairs",
        description="Draws pairs from the manifest sources (held-out region when "
        "the manifest declares a split) and records one row per pair and method; "
        "the no-op method that always answers with the identity is always "
        "included.  Prints per-method fractions under 1/3/5/10%% corner error.",
    )
    p.add_argument("manifest")
    p.add_argument("out", help="eval CSV to write")
    p.add_argument("--methods", default="raw",
                   help="comma list: raw, normalize, stack:PATH (default raw)")
    p.add_argument("--pairs", type=int, default=200, metavar="N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing", action="store_true",
                   help="record wall_ms per row (nondeterministic; off by default)")
    p.add_argument("--jobs", type=int, default=1, metavar="N",
                   help="solve pairs in N forked processes; rows are gathered and "
                   "sorted by pair id, so results are order-independent")
    _add_pair_flags(p)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "train", help="train an extractor stack",
        description="Runs SGD per the key-value config file over pairs generated "
        "from the manifest (train region for steps, held-out region for "
        "validation).  Writes OUT (best-validation checkpoint), OUT.last "
        "(final weights, resumable), and OUT.history.csv.",
    )
    p.add_argument("config", help="key-value text config; see module docs for keys")
    p.add_argument("manifest")
    p.add_argument("out", help="checkpoint path to write")
    p.add_argument("--single-iteration", action="store_true",
                   help="cap every training forward at one solver iteration")
    p.add_argument("--resume", metavar="CKPT",
                   help="continue from a .last checkpoint written by a previous run "
                   "(use the same config file and manifest)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "cdf", help="tabulate corner-error CDFs from an eval CSV",
        description="Sweeps thresholds 0..30%% in 0.25%% steps and writes the "
        "fraction of each method's pairs at or under each threshold.",
    )
    p.add_argument("eval_csv")
    p.add_argument("out", help="CDF CSV to write")
    p.set_defaults(func=cmd_cdf)

    p = sub.add_parser(
        "dump-pairs", help="write generated pairs to disk as FGT1 + ground truth CSV",
        description="Materializes the pairs `evaluate` would draw with the same "
        "manifest and seed: pair_NNNN_template.fgt1, pair_NNNN_image.fgt1, and "
        "ground_truth.csv.",
    )
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--count", type=int, default=10, metavar="N")
    p.add_argument("--seed", type=int, default=0)
    _add_pair_flags(p)
    p.set_defaults(func=cmd_dump_pairs)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AlignkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
