"""Exception types raised across the simulator.

All derive from ValueError so callers that only care about "bad input"
can catch one base class.
"""


class DescriptorError(ValueError):
    """Model descriptor is structurally invalid or shape-incompatible."""


class ShapeError(ValueError):
    """Input batch does not match the descriptor's expected input shape."""


class LabelRangeError(ValueError):
    """A label lies outside [0, class_count)."""


class LayoutError(ValueError):
    """Parameter/gradient vector lengths or layouts do not match."""


class InsufficientDataError(ValueError):
    """Not enough samples to satisfy a partitioning request."""


class IdxFormatError(ValueError):
    """An IDX file has a bad magic number or inconsistent counts."""


class PoolExhaustedError(ValueError):
    """No valid architecture found within the resampling budget."""


class NoUpdatesError(ValueError):
    """Aggregation was called with an empty update list."""


class SimilarityUndefinedError(ValueError):
    """Cosine similarity requested against a zero vector."""


class RankUndefinedError(ValueError):
    """Cluster ranking needs at least two clusters."""


class BudgetError(ValueError):
    """Epoch-budget arithmetic is undefined for the given configuration."""


class ConfigParseError(ValueError):
    """A config file line could not be parsed.

    Carries the 1-based line number when one is known.
    """

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class ConfigValidationError(ValueError):
    """A parsed config violates a constraint (the message names it)."""
