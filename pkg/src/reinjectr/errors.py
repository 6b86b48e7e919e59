"""Exception hierarchy shared by every module."""


class ReinjectrError(Exception):
    """Base class for all library errors."""


class InvalidInput(ReinjectrError, ValueError):
    """Arguments violate an operation's preconditions."""


class NumericalFailure(ReinjectrError, ArithmeticError):
    """A computation diverged, produced NaN, or failed to converge."""


class CorruptDump(ReinjectrError):
    """A binary file is truncated or its contents are inconsistent."""


class UnsupportedVersion(ReinjectrError):
    """A binary file declares a format version this reader does not know."""


class IoError(ReinjectrError, OSError):
    """Reading or writing a file failed at the OS level."""


class DegenerateWarning(UserWarning):
    """A result was produced from rank-deficient or otherwise degenerate input."""
