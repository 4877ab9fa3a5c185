"""Exception hierarchy for warpfit."""


class WarpfitError(Exception):
    """Base class for all warpfit errors."""


class DomainError(WarpfitError, ValueError):
    """An evaluation point lies outside the working interval."""


class ConstraintError(WarpfitError, ValueError):
    """A knot vector or grid violates an ordering or range constraint."""


class ParameterError(WarpfitError, ValueError):
    """Model parameters are invalid (e.g. non-positive variance)."""


class SeparationError(WarpfitError, ArithmeticError):
    """Logistic coefficients diverge because the classes are separable."""


class FitError(WarpfitError, RuntimeError):
    """The EM fit could not proceed."""


class DataFormatError(WarpfitError, ValueError):
    """Malformed input file."""
