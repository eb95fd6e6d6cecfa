"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DependencyError -> 3.
"""


class TpbError(Exception):
    """Base class for package errors."""


class ConfigError(TpbError):
    """Invalid or missing configuration value."""


class DependencyError(TpbError):
    """A required input artifact is missing or inconsistent."""


class DataError(TpbError):
    """Malformed series, window, or corpus."""


class ArchiveError(TpbError):
    """An artifact file failed validation on load."""


class BankFormatError(ArchiveError):
    """Base class for pattern-bank file problems."""


class BankVersionError(BankFormatError):
    """Magic bytes or format version do not match."""


class BankCorruptError(BankFormatError):
    """Header or payload is truncated or inconsistent."""


class TrainingDivergedError(TpbError):
    """A training loop produced a non-finite loss or gradient."""
