"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, ArtifactError -> 3,
NumericalError -> 4. Everything else is a plain bug.
"""


class ConfigError(ValueError):
    """Invalid or missing user configuration."""


class DataFormatError(ConfigError):
    """Malformed dataset file; message names the offending line/row."""


class ArtifactError(RuntimeError):
    """Stored artifact is incompatible with the requested operation."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Misuse of the autodiff tape (wrong tape, non-scalar loss, ...)."""


class NumericalError(FloatingPointError):
    """A numeric operation produced NaN/Inf or an otherwise degenerate value."""
