"""Exception hierarchy shared by every stage of the pipeline."""


class SpectraScanError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SpectraScanError, ValueError):
    """Inputs are individually valid but inconsistent (e.g. mismatched grids)."""


class BehindCameraError(SpectraScanError, ValueError):
    """A point has nonpositive depth in the device frame."""


class DegenerateGeometryError(SpectraScanError, ValueError):
    """Geometry is too degenerate to solve (parallel rays, collinear points)."""


class InitializationError(SpectraScanError, RuntimeError):
    """Two-view bootstrap failed."""


class RegistrationError(SpectraScanError, RuntimeError):
    """A view could not be registered against the current reconstruction."""


class OptimizationError(SpectraScanError, RuntimeError):
    """Bundle adjustment diverged. ``state`` holds the last stable state."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
