"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition (bad value, bad file, bad config)."""


class ShapeError(ValidationError):
    """Array dimensions are incompatible with the operation."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient); message carries diagnostics."""
