"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/format
problems exit 2, numeric failures exit 3.
"""


class SignsegError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SignsegError, ValueError):
    """Shape or length mismatch between tensors, sequences or label vectors."""


class ConfigError(SignsegError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(SignsegError, ValueError):
    """Malformed binary or text file.  Carries the byte offset or line number."""

    def __init__(self, message, path=None, offset=None, line=None):
        loc = ""
        if path is not None:
            loc += f" [{path}"
            if offset is not None:
                loc += f" @ byte {offset}"
            if line is not None:
                loc += f" @ line {line}"
            loc += "]"
        super().__init__(message + loc)
        self.path = path
        self.offset = offset
        self.line = line


class AnnotationError(SignsegError, ValueError):
    """Segment annotation violates its invariants (overlap, range, order)."""


class NumericError(SignsegError, ArithmeticError):
    """Non-finite loss or other numeric breakdown during training."""


class StateError(SignsegError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""
