"""Exception hierarchy shared by every subpackage.

The CLI maps these onto its exit codes: usage/config problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class DewarpError(Exception):
    """Base class for all errors raised by docdewarp."""


class UsageError(DewarpError):
    pass


class ConfigError(UsageError):
    pass


class DimensionError(DewarpError, ValueError):
    """Tensor or image shapes are incompatible with the requested operation."""


class NumericError(DewarpError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class GraphError(DewarpError):
    """The recorded operation graph is malformed (e.g. contains a cycle)."""


class DegenerateWarpError(DewarpError):
    """A generated or inverted warp is not usable (fold-over, too many holes)."""


class DataIntegrityError(DewarpError):
    """Dataset or checkpoint files are missing, truncated or corrupt."""


class MetricError(DewarpError):
    """A metric cannot be evaluated on the given inputs."""
