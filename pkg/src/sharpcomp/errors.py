"""Exception types shared across the toolkit."""


class SharpcompError(Exception):
    """Base class for all toolkit errors."""


class ContractViolation(SharpcompError):
    """An input violates a documented precondition (bad shape, asymmetry, p < 1, ...)."""


class NumericFailure(SharpcompError):
    """A numeric routine failed to meet its accuracy contract.

    Carries the offending residual so callers can report it.
    """

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class DivergenceError(SharpcompError):
    """Training diverged (non-finite or exploding loss)."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss!r})")
        self.step = step
        self.loss = loss


class FormatError(SharpcompError):
    """A file does not match its documented on-disk format."""


class ConfigError(SharpcompError):
    """A run configuration is missing, malformed, or out of range."""


class StructureError(SharpcompError):
    """A network does not have the layer structure an operation requires."""


class UndefinedCorrelationError(SharpcompError):
    """Correlation requested on data with zero variance or too few points."""
