"""Dense image alignment with inverse-compositional Lucas-Kanade over feature grids."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .errors import (
    AlignkitError,
    DegenerateConfiguration,
    DegenerateWarp,
    DivergenceDetected,
    FormatError,
    GridTooSmall,
    IncompleteTape,
    InputTooSmall,
    OutOfBounds,
    RejectionBudgetExhausted,
    ShapeMismatch,
    SingularHessian,
    SourceTooSmall,
)
from .grid import (
    FeatureGrid,
    ValidityMask,
    extract_patch,
    gradient,
    normalize_per_channel,
    sample_bilinear,
    warp_grid,
)
from .warp import (
    Homography,
    WarpParams,
    apply_homography,
    conjugate_by_scale,
    corner_displacements,
    grid_corners,
    homography_from_corner_offsets,
    update_inverse_compositional,
    warp_jacobian,
    warp_point,
)

__version__ = "0.1.0"
