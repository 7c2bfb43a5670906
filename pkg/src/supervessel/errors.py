"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value or inconsistent option combination."""


class ShapeError(ValueError):
    """Tensor or mask extents violate an operation's contract."""


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


class ManifestError(ValueError):
    """Dataset manifest is missing, malformed, or inconsistent."""


class CheckpointError(RuntimeError):
    """Checkpoint cannot be read or does not match the requested use."""


class DivergenceError(RuntimeError):
    """A loss term became non-finite."""

    def __init__(self, term, value, step=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term '{term}'{where}: {value}")
        self.term = term
        self.value = value
        self.step = step
