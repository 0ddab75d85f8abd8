"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4.
"""


class LutKitError(Exception):
    """Base class for all package errors."""


class ConfigError(LutKitError):
    """Invalid configuration: bad K/V combination, empty grid, bad flag."""


class ShapeError(ConfigError):
    """Operand dimensions are inconsistent with each other or the config."""


class DataError(LutKitError):
    """Unusable input data: NaN samples, empty sets, unreadable files."""


class ContainerError(DataError):
    """Model container is corrupt, or carries an unsupported version/tag."""


class CorruptionError(LutKitError):
    """An internal invariant was violated (e.g. encoding index >= K)."""


class DivergenceError(LutKitError):
    """Training produced a non-finite loss."""
