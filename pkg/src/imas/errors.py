"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ArgumentError and its subclasses
exit 2, DataError and OS-level I/O failures exit 3, NumericError exits 4.
"""


class ImasError(Exception):
    """Base class for all package-specific errors."""


class ArgumentError(ImasError):
    """A caller supplied an invalid argument, flag, or configuration value."""


class DimensionError(ArgumentError):
    """Array/tensor shapes do not line up for the requested operation."""


class ConfigError(ArgumentError):
    """Two components that must agree structurally do not."""


class NumericError(ImasError):
    """A computation produced or was fed non-finite values."""


class DataError(ImasError):
    """A dataset file is missing, corrupt, or otherwise undecodable."""
