"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """A caller-supplied argument violates an operation's precondition."""


class EmptySurfaceError(RuntimeError):
    """Isosurface extraction found no zero crossing."""


class DegenerateScheduleError(RuntimeError):
    """A diffusion schedule step has alpha (or sigma) equal to zero."""


class DegenerateGeometryError(RuntimeError):
    """Point configuration too degenerate for a rigid fit."""


class EmptyMaskError(RuntimeError):
    """A segmentation step produced or received an empty mask."""


class EmptyDatasetError(RuntimeError):
    """Dataset construction rejected every sample."""


class SkipSampleError(RuntimeError):
    """A distillation sample produced non-finite critic output; skip it."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
