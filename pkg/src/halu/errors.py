"""Exception types shared across the package."""


class HaluError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(HaluError, ValueError):
    """Array dimensions do not match what an operation requires."""


class DomainError(HaluError, ValueError):
    """Values lie outside the mathematical domain of an operation."""


class ConfigError(HaluError, ValueError):
    """A configuration object violates its invariants."""


class FormatError(HaluError, ValueError):
    """A file is not in the expected on-disk format."""


class TrainingDiverged(HaluError, RuntimeError):
    """Training produced a non-finite loss; carries diagnostic context."""

    def __init__(self, message, epoch=None, batch=None, grad_norms=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.grad_norms = grad_norms or {}
