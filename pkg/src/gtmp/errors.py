"""Exception hierarchy shared across the package.

Two broad families matter for the CLI exit-code contract: data/validation
problems (exit code 2) and numeric/geometric failures (exit code 3).
"""


class GtmpError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(GtmpError):
    """Malformed input data, configuration, or contract violation."""


class NumericFailure(GtmpError):
    """Numeric or geometric computation cannot proceed."""


# -- data / validation ------------------------------------------------------

class FormatError(ValidationError):
    """Input text or file does not match the expected format."""


class MultiRootError(ValidationError):
    """Tree input declares more than one root node."""


class CycleError(ValidationError):
    """Parent links contain a cycle (or no root is reachable)."""


class DegenerateEdgeError(ValidationError):
    """A parent-child edge is shorter than the minimum edge length."""


class ConfigError(ValidationError):
    """A configuration object violates its invariants."""


class ShapeError(ValidationError):
    """Tensor shapes do not line up."""


class ContractError(ValidationError):
    """An operation was called with arguments outside its contract."""


class CheckpointError(ValidationError):
    """A checkpoint is incompatible with the requested configuration."""


class MetricError(ValidationError):
    """A metric was requested on inputs it is not defined for."""


# -- numeric / geometric ----------------------------------------------------

class NumericError(NumericFailure):
    """Non-finite values where finite reals are required."""


class TransformError(NumericFailure):
    """A rigid transform violates orthonormality or orientation."""


class CollinearError(NumericFailure):
    """Anchor points are collinear where a frame is required."""


class InfeasibleError(NumericFailure):
    """Branch features admit no consistent placement."""


class UnreachableNodeError(NumericFailure):
    """Coordinate propagation cannot reach every node of the tree."""
