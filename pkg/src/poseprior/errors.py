"""Exception types shared across the package."""


class PosePriorError(Exception):
    """Base class for all package-specific errors."""


class DefinitenessError(PosePriorError):
    """A matrix that must be positive (semi-)definite is not."""


class BehindCameraError(PosePriorError):
    """A point with non-positive depth was passed to the projection."""


class DivergenceError(PosePriorError):
    """Non-finite state encountered during training or sampling."""

    def __init__(self, message, step=None, diagnostics=None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}


class InsufficientSupportError(PosePriorError):
    """Too few usable pixels to fit a Gaussian to a heatmap."""


class FitFailureError(PosePriorError):
    """Heatmap fit produced an unusable covariance."""


class AlignmentError(PosePriorError):
    """Degenerate configuration passed to Procrustes alignment."""


class ParseError(PosePriorError):
    """Malformed record in a text data file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(PosePriorError):
    """Structurally valid file whose contents violate the schema."""


class FormatError(PosePriorError):
    """Binary file does not match the expected layout."""


class VersionError(FormatError):
    """File version not supported by this reader."""
