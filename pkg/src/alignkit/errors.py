"""Exception hierarchy for alignkit."""


class AlignkitError(Exception):
    """Base class for all alignkit errors."""


class DegenerateWarp(AlignkitError):
    """A warp maps a point to infinity or its matrix is numerically singular."""


class DegenerateConfiguration(AlignkitError):
    """Corner configuration unusable for homography fitting (collinear points)."""


class GridTooSmall(AlignkitError):
    """Grid smaller than the minimum an operation supports."""


class OutOfBounds(AlignkitError):
    """Requested region falls outside the grid."""


class InputTooSmall(AlignkitError):
    """Input spatial dims too small for the extractor's receptive arithmetic."""


class ShapeMismatch(AlignkitError):
    """Tensor dims disagree with a declared shape contract."""


class SingularHessian(AlignkitError):
    """The (damped) normal-equation system is numerically singular."""


class SourceTooSmall(AlignkitError):
    """Source imagery too small for the requested patch, pad and warp margin."""


class RejectionBudgetExhausted(AlignkitError):
    """Rejection sampling failed to produce an admissible draw in budget."""


class IncompleteTape(AlignkitError):
    """Backward requested on a tape that never reached a scalar loss."""


class DivergenceDetected(AlignkitError):
    """Training batch loss became non-finite.

    Carries the best checkpoint seen so far plus the history up to the abort,
    so callers can still persist usable state.
    """

    def __init__(self, message, best_stack=None, history=None):
        super().__init__(message)
        self.best_stack = best_stack
        self.history = history


class FormatError(AlignkitError):
    """Malformed file content (FGT1 stream, manifest, checkpoint, CSV)."""
