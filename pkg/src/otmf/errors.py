"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies.
"""


class OtmfError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(OtmfError):
    """Invalid or inconsistent configuration values. Exit code 2."""


class ShapeMismatchError(OtmfError):
    """Structural mismatch between parameter vectors or arrays. Exit code 3."""


class DataError(OtmfError):
    """Missing, empty, or malformed data. Exit code 3."""


class NumericalError(OtmfError):
    """Non-finite values or solver breakdown. Exit code 4."""
