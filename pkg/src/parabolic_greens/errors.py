"""Exception hierarchy shared by the library and the command-line front end.

Each class carries the process exit code the CLI reports for it.
"""


class PGreenError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(PGreenError, ValueError):
    """Invalid arguments, shapes or configuration."""

    exit_code = 2


class ResourceError(PGreenError):
    """A configured resource cap would be exceeded, or a path is unusable."""

    exit_code = 3


class NumericalError(PGreenError, ArithmeticError):
    """Non-finite values or a failed linear solve."""

    exit_code = 4


class InternalConsistencyError(PGreenError, AssertionError):
    """An enumerated quantity disagrees with its closed form."""

    exit_code = 4


class ModelFormatError(PGreenError):
    """A model file could not be decoded."""

    exit_code = 3
    code = "format"


class VersionMismatchError(ModelFormatError):
    code = "version"


class TruncatedFileError(ModelFormatError):
    code = "truncated"


class ChecksumError(ModelFormatError):
    code = "checksum"
