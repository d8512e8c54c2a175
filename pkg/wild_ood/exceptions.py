"""
Exceptions Module for Wild OOD
Error hierarchy shared by the library and the command-line runner
"""

from typing import Optional


class WildOODError(Exception):
    """Base class for every error raised by the package"""

    exit_code = 1


class ConfigurationError(WildOODError, ValueError):
    """Invalid configuration value, missing field or unsupported option"""

    exit_code = 2


class DataError(WildOODError):
    """Problem with input data (files, pools, batches)"""

    exit_code = 3


class DataParseError(DataError, ValueError):
    """
    A data file could not be parsed

    Args:
        message: Description of the problem
        path: File being parsed
        line: 1-based line number in the file (header is line 1)
    """

    def __init__(self, message: str, path: Optional[str] = None,
                 line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location += f"{path}"
        if line is not None:
            location += f" line {line}"
        if location:
            message = f"{location.strip()}: {message}"
        super().__init__(message)


class UsageError(DataError, ValueError):
    """Operation called with inputs it cannot work with (e.g. empty batch)"""


class ShapeError(DataError, ValueError):
    """Array dimensions do not compose"""


class NumericError(WildOODError, ArithmeticError):
    """
    Non-finite value or divergence during a numerical routine

    Args:
        message: Description of the problem
        location: Parameter path or epoch/batch where it happened
    """

    exit_code = 4

    def __init__(self, message: str, location: Optional[str] = None):
        self.location = location
        if location:
            message = f"{message} (at {location})"
        super().__init__(message)


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception to the runner's exit code

    Args:
        error: Exception caught by the runner

    Returns:
        2 for configuration errors, 3 for data and I/O errors,
        4 for numeric aborts, 1 for anything else
    """
    if isinstance(error, WildOODError):
        return error.exit_code
    if isinstance(error, (FileNotFoundError, OSError)):
        return DataError.exit_code
    return 1
