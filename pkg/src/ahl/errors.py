"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/validation problems
exit 1, runtime/numerical failures exit 2, I/O and file-format problems
exit 3.
"""


class AhlError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AhlError):
    """Invalid configuration, flags, or preconditions on run setup."""


class DimensionError(AhlError):
    """Tensor/array shapes do not conform to an operation's contract."""


class NumericalError(AhlError):
    """A computation produced non-finite values or otherwise diverged."""


class FormatError(AhlError):
    """A file on disk is malformed; message names the file (and offset)."""
