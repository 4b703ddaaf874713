"""Exception types shared across the package."""


class SkiplabError(Exception):
    """Base class for all package errors."""


class ShapeError(SkiplabError, ValueError):
    """Operand shapes do not conform."""


class DomainError(SkiplabError, ValueError):
    """A numeric argument is outside its valid range."""


class ConfigError(SkiplabError, ValueError):
    """A configuration value is inconsistent or missing."""


class ContractError(SkiplabError, RuntimeError):
    """An API contract was violated (e.g. backward from a non-scalar)."""


class DegenerateActivationError(SkiplabError, ArithmeticError):
    """A measurement hit a degenerate activation (e.g. zero-norm tap)."""


class TrainingError(SkiplabError, RuntimeError):
    """Training diverged; carries the step index where it happened."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
