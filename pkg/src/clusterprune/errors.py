"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not agree."""


class NumericError(ArithmeticError):
    """Non-finite values in an input or a computed loss."""


class ClusterError(ValueError):
    """Invalid cluster assignment, ratio, or spec/model mismatch."""


class DecisionError(ValueError):
    """A prune decision does not fit the model it is applied to."""


class FormatError(ValueError):
    """Malformed binary or IDX file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """Model container written by an unsupported format version."""


class DataError(ValueError):
    """Dataset contents are inconsistent."""


class ConfigError(ValueError):
    """Experiment configuration failed validation."""
