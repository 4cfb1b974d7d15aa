"""Exception types shared across the package."""


class NotPositiveDefinite(ValueError):
    """A matrix required to be Hermitian positive definite is not."""


class NonFiniteValue(FloatingPointError):
    """A NaN or Inf appeared in a computation that must stay finite."""


class MapTooSmall(ValueError):
    """A data map is too small for even one complete extraction window."""


class ParseError(ValueError):
    """A data file is malformed; message carries the byte offset or line."""


class DegenerateInput(ValueError):
    """An input (zero vector, empty set) makes the requested statistic undefined."""


class DivergenceDetected(RuntimeError):
    """Training loss became non-finite or stayed pathologically large."""


class ValidationError(ValueError):
    """A run configuration failed validation before any work started."""
