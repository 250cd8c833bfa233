"""Exception types shared across the package."""


class MFGError(Exception):
    """Base class for all package errors."""


class ModelParseError(MFGError, ValueError):
    """The model file is malformed."""


class ModelValidationError(MFGError, ValueError):
    """The model parses but violates the Kolmogorov-matrix conditions."""


class SimplexError(MFGError, ValueError):
    """A vector is not a probability vector."""


class DegenerateMassError(MFGError, ArithmeticError):
    """Total mass collapsed below the renormalization guard."""


class GridMismatchError(MFGError, ValueError):
    """Two objects expected to share a time grid do not."""


class CapExceededError(MFGError, RuntimeError):
    """Optimality polytope has more vertices than the enumeration cap."""


class SelectorResidualError(MFGError, RuntimeError):
    """No selector in the optimality polytope fits the field."""
