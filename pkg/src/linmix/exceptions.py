"""Exception types shared across the package."""


class LinmixError(Exception):
    """Base class for all linmix errors."""


class ShapeError(LinmixError, ValueError):
    """Operand dimensions are inconsistent with the operation's contract."""


class ConfigError(LinmixError, ValueError):
    """A run configuration is malformed (unknown key, bad value, bad range)."""


class DegenerateGateError(LinmixError, ArithmeticError):
    """A gate-side normalization denominator collapsed below the guard."""


class DegenerateFeatureError(LinmixError, ArithmeticError):
    """A feature map lost strict positivity (or its normalization
    denominator collapsed below the guard)."""


class EmptyShardError(LinmixError, ValueError):
    """A shard with zero tokens was passed where tokens are required."""


class FormatError(LinmixError, ValueError):
    """A serialized blob does not follow the declared binary layout."""


class StepError(LinmixError, ValueError):
    """A diffusion step index lies outside the schedule range."""


class TapError(LinmixError, ValueError):
    """Teacher and student expose mismatched per-layer feature taps."""


class TrainingError(LinmixError, RuntimeError):
    """Training diverged (non-finite loss); carries the failing step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
