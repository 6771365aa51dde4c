"""Compare the numba kernels against the pure-numpy reference implementations.

Both backends are imported directly (the ALIGNKIT_DISABLE_NUMBA switch only
picks which one the package re-exports), every kernel is cross-checked for
agreement on shared random inputs, and median-of-N wall times are tabulated.

    python3 benchmarks/bench_kernels.py [--repeat 30] [--grid 192] [--channels 8]
"""

import argparse
import time

import numpy as np

from alignkit._kernels import numba_impl, numpy_impl


def median_ms(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def build_cases(grid, channels, seed=0):
    """(name, callable kwargs, comparator) per kernel, shared inputs."""
    rng = np.random.default_rng(seed)
    c, h, w = channels, grid, grid
    data = rng.standard_normal((c, h, w))
    m = np.array([[1.01, 0.002, 1.3], [-0.003, 0.99, -2.1], [1e-5, -2e-5, 1.0]])
    n = h * w
    xs = rng.uniform(-2, w + 1, n)
    ys = rng.uniform(-2, h + 1, n)
    inb = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    gvals = rng.standard_normal((c, n))
    tpl = rng.standard_normal((c, h, w))
    sd = rng.standard_normal((c, h, w, 8))
    x1 = rng.standard_normal((1, grid, grid))
    weights = rng.standard_normal((8, 1, 3, 3))
    bias = rng.standard_normal(8)
    ho = wo = (grid - 3) // 2 + 1
    gy = rng.standard_normal((8, ho, wo))

    def both(name, args, close=lambda a, b: np.allclose(a, b, atol=1e-10)):
        return name, args, close

    def tuple_close(a, b):
        return all(np.allclose(x, y, atol=1e-10) for x, y in zip(a, b))

    return [
        both("bilinear_sample_points", ("bilinear_sample_points", (data, xs, ys)), tuple_close),
        both("warp_grid_resample", ("warp_grid_resample", (data, m, h, w)), tuple_close),
        both("iclk_rhs", ("iclk_rhs", (tpl, sd, data, m)), tuple_close),
        both("conv2d_forward", ("conv2d_forward", (x1, weights, bias, 2))),
        both("conv2d_bwd_input", ("conv2d_bwd_input", (gy, weights, 2, grid, grid))),
        both("conv2d_bwd_weights", ("conv2d_bwd_weights", (x1, gy, 3, 2))),
        both("bilinear_scatter_add", ("bilinear_scatter_add", (gvals, xs, ys, inb, h, w))),
        both("bilinear_coord_grad", ("bilinear_coord_grad", (data, xs, ys, inb, gvals)), tuple_close),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--grid", type=int, default=192, help="square grid side (default 192)")
    ap.add_argument("--channels", type=int, default=8)
    args = ap.parse_args()

    numba_impl.warmup()
    cases = build_cases(args.grid, args.channels)

    print(f"grid {args.grid}x{args.grid}, {args.channels} channels, "
          f"median of {args.repeat} runs")
    print(f"{'kernel':<24} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for name, (fname, fargs), close in cases:
        ref = getattr(numpy_impl, fname)(*fargs)
        got = getattr(numba_impl, fname)(*fargs)
        agree = close(ref, got)
        t_np = median_ms(lambda: getattr(numpy_impl, fname)(*fargs), args.repeat)
        t_nb = median_ms(lambda: getattr(numba_impl, fname)(*fargs), args.repeat)
        print(f"{name:<24} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x  {agree}")
        if not agree:
            raise SystemExit(f"backend disagreement in {name}")


if __name__ == "__main__":
    main()
