"""Exception types shared across the pipeline.

The CLI maps :class:`ValidationError` to exit code 1 and
:class:`NumericalError` to exit code 2.
"""


class RomsuiteError(Exception):
    """Base class for all romsuite errors."""


class ValidationError(RomsuiteError, ValueError):
    """Bad input: wrong shapes, out-of-range settings, missing artifacts."""


class NumericalError(RomsuiteError, ArithmeticError):
    """A computation blew up or a linear system could not be solved."""


class RankError(ValidationError):
    """Requested POD rank exceeds the numerical rank of the data."""
