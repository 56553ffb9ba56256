"""Exception hierarchy shared across the library.

The CLI maps these onto exit codes: usage/config problems exit 2,
numeric/solver failures exit 3, I/O and file-format problems exit 4.
"""


class IpotError(Exception):
    """Base class for all library errors."""


class DimensionError(IpotError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(IpotError):
    """A computation produced or received non-finite / undefined values."""


class UsageError(IpotError):
    """An operation was called in a way its contract forbids."""


class ConfigError(IpotError):
    """Model configuration and data disagree (widths, channels, ...)."""


class FormatError(IpotError):
    """A serialized file is malformed. Carries a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SolverError(NumericError):
    """An iterative solver failed to converge or went unstable."""


class InputError(UsageError):
    """Input data violates a generator/solver precondition."""
