"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems (2), dataset and
file problems (3), numerical failures (4), verification failures (5).
"""


class NumericsError(Exception):
    """Base class for numerical failures."""


class NotPositiveDefinite(NumericsError):
    """Factorization failed even after the jitter ladder; curvature is degenerate."""


class DimensionMismatch(NumericsError):
    """Operand shapes are incompatible."""


class ShapeMismatch(NumericsError):
    """Gradient or accumulator shapes do not match the parameters."""


class IndexOutOfRange(NumericsError):
    """A class index or example id is outside the valid range."""


class EmptyBatch(ValueError):
    """An operation that averages over a batch received no examples."""


class InvalidDimensions(ValueError):
    """Nonpositive or inconsistent sizes in a constructor."""


class InvalidHyperparameter(ValueError):
    """A hyper-parameter is outside its valid range."""


class InvalidRate(ValueError):
    """A noise rate or imbalance ratio is outside its valid range."""


class InsufficientClassCount(ValueError):
    """A class does not have enough examples for the requested subsampling."""


class BatchTooSmall(ValueError):
    """Fewer candidates than the requested number of selections."""


class DataError(Exception):
    """Base class for dataset / file-format problems."""


class ParseError(DataError):
    """A data or reference file could not be parsed."""


class MissingExample(DataError):
    """A reference table does not cover every dataset example id."""

    def __init__(self, example_id, message=None):
        self.example_id = example_id
        super().__init__(message or f"missing example id {example_id}")


class LabelOutOfRange(DataError):
    """A label in a data file is negative or not an integer."""


class CorruptCheckpoint(DataError):
    """A checkpoint failed its checksum or structural validation."""


class ConfigError(Exception):
    """An invalid, unknown, or inconsistent configuration value."""


class MismatchedTargets(ValueError):
    """Run reports being compared do not share the same target list."""


class GridTooCoarse(Exception):
    """Grid refinement moved a quadrature result by more than the tolerance."""


class BoundViolation(Exception):
    """An exact predictive fell below one of its certified lower bounds."""


class DimensionLimit(ValueError):
    """A dense reference computation was asked to exceed its size cap."""
