"""Backend selection for the hot kernels.

The numba backend is used when numba imports cleanly; set
ALIGNKIT_DISABLE_NUMBA=1 (or anything non-empty) to force the pure-numpy
reference implementations.  `BACKEND` names the active one.
"""

import os

if os.environ.get("ALIGNKIT_DISABLE_NUMBA"):
    _impl = None
else:
    try:
        from . import numba_impl as _impl
    except ImportError:  # pragma: no cover - depends on environment
        _impl = None

if _impl is None:
    from . import numpy_impl as _impl

    BACKEND = "numpy"
else:
    BACKEND = "numba"

bilinear_sample_points = _impl.bilinear_sample_points
warp_coords = _impl.warp_coords
warp_grid_resample = _impl.warp_grid_resample
iclk_rhs = _impl.iclk_rhs
conv2d_forward = _impl.conv2d_forward
conv2d_bwd_input = _impl.conv2d_bwd_input
conv2d_bwd_weights = _impl.conv2d_bwd_weights
bilinear_scatter_add = _impl.bilinear_scatter_add
bilinear_coord_grad = _impl.bilinear_coord_grad


def warmup():
    """Compile the numba kernels now (no-op on the numpy backend)."""
    fn = getattr(_impl, "warmup", None)
    if fn is not None:
        fn()
