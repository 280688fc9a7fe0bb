"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


class DegenerateGeometry(ValueError):
    pass


class UnsupportedTopology(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""
