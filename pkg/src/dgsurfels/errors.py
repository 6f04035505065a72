"""Exception types shared across the package."""


class DGSError(Exception):
    """Base class for all package-specific errors."""


class DegenerateInput(DGSError):
    """A geometric quantity collapsed below the numerical floor
    (e.g. a dual quaternion whose real part has ~zero norm)."""


class InsufficientPoints(DGSError):
    """Too few points to run an initializer."""


class ShapeMismatch(DGSError):
    """Two arrays that must agree in shape do not."""


class NonFiniteLoss(DGSError):
    """A training loss evaluated to NaN or infinity."""


class MalformedHeader(DGSError):
    """An image file header could not be parsed."""


class IoError(DGSError):
    """A file could not be read or written."""


class VersionMismatch(DGSError):
    """A checkpoint carries an unknown format version."""


class ParseError(DGSError):
    """A checkpoint or config document is structurally invalid."""
