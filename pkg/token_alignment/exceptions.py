"""
App level exceptions. Each one carries the exit code the management commands
report when it escapes a command.
"""

from .constants import EXIT_DATA, EXIT_NUMERICAL, EXIT_USAGE


class AlignmentError(Exception):
    """Base class for every error raised by the token_alignment app."""

    exit_code = EXIT_USAGE


class ConfigurationError(AlignmentError):
    """
    Invalid configuration: bad config keys or values, an unknown mode, or an
    image whose size does not fit the backbone stride.

    Attributes:
        errors (dict | None): Field level errors, as produced by a DRF serializer.
    """

    exit_code = EXIT_USAGE

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors


class InvalidInputError(AlignmentError):
    exit_code = EXIT_USAGE


class DataError(AlignmentError):
    """Missing or unreadable data on disk."""

    exit_code = EXIT_DATA


class ParseError(DataError):
    """
    A malformed file. The message always names the file and the byte offset
    where parsing failed.
    """

    def __init__(self, path, offset, reason):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = str(path)
        self.offset = offset
        self.reason = reason


class GenerationError(DataError):
    pass


class CheckpointLoadError(DataError):
    pass


class NumericalError(AlignmentError):
    """
    Non-finite values met during training or loss evaluation.

    Attributes:
        term (str | None): Name of the loss term that went non-finite.
    """

    exit_code = EXIT_NUMERICAL

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term
