"""Exception types shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError/ConfigError -> 2, NumericalError -> 3.
"""


class UsageError(Exception):
    """Bad command line: unknown subcommand, unknown flag, missing argument."""


class DataError(Exception):
    """Malformed or inconsistent data on disk (datasets, checkpoints, manifests)."""


class ConfigError(DataError):
    """A config field is missing, unparseable, or outside its valid range."""


class ShapeError(ValueError):
    """Operation inputs have incompatible shapes."""


class NumericalError(Exception):
    """Training produced a non-finite value; the message names the component."""
