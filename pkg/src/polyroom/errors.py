"""Exception hierarchy shared by all polyroom modules.

Three top-level families map onto the CLI exit codes: ConfigError (1),
DataError (2) and NumericError (3).
"""


class PolyroomError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PolyroomError):
    """Bad flag combination, unknown config key, or inconsistent settings."""


class DataError(PolyroomError):
    """Malformed, missing, or geometrically invalid input data."""


class NumericError(PolyroomError):
    """Numeric failure: NaN loss, shape mismatch inside the engine, etc."""


# -- data family ------------------------------------------------------------

class InvalidPolygonError(DataError):
    """Fewer than 3 distinct vertices, or a violated polygon precondition."""


class DegenerateEdgeError(DataError):
    """A zero-length edge where a direction is required."""


class UndefinedIoUError(DataError):
    """IoU requested for a pair whose union has zero area."""


class DegenerateResultError(DataError):
    """An operation collapsed a polygon below 3 vertices."""


class CapacityError(DataError):
    """More items than a fixed-size container admits (corners > N, rooms > M)."""


class SchemaError(DataError):
    """Scene manifest missing keys or holding values of the wrong shape."""


class DimensionMismatchError(DataError):
    """Grids that must share a size do not."""


class EmptyMaskError(DataError):
    """Instance mask with no foreground pixels."""


class DegenerateExtentError(DataError):
    """Point cloud with no usable spatial extent."""


class GenerationError(DataError):
    """Synthetic scene generation failed after bounded retries."""


class CoverageError(DataError):
    """Prediction and ground-truth scene ids do not line up."""


# -- numeric family ----------------------------------------------------------

class ShapeError(NumericError):
    """Shape-incompatible operands passed to a tensor op."""


class ContractError(NumericError):
    """An engine-level contract violated (e.g. non-scalar gradient root)."""
