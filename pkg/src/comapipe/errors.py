"""Exception hierarchy shared across the pipeline.

Data problems (bad files, out-of-range values) derive from ``DataError`` and
map to CLI exit code 3. ``ContractError`` signals a caller bug such as a
dimension mismatch.
"""


class ComaPipeError(Exception):
    """Base class for all package errors."""


class DataError(ComaPipeError, ValueError):
    """Input data is malformed or inconsistent."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    pass


class FormatError(DataError):
    pass


class ConfigError(ComaPipeError, ValueError):
    pass


class ContractError(ComaPipeError, ValueError):
    pass


class TrainingError(DataError):
    pass


class BundleError(DataError):
    """Model bundle is corrupted or has an incompatible version."""
