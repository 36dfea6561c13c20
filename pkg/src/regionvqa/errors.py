"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or inconsistent."""


class BackwardError(RuntimeError):
    """The gradient tape was used incorrectly (e.g. backward run twice)."""


class NonDeterminismError(RuntimeError):
    """Two evaluations of the same computation disagreed."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class FormatError(ValueError):
    """A binary or text file does not follow its declared layout."""
