"""Exception types shared across the package."""


class EvicoError(Exception):
    """Base class for all package errors."""


class ShapeError(EvicoError, ValueError):
    pass


class DomainError(EvicoError, ValueError):
    pass


class ContractError(EvicoError, RuntimeError):
    pass


class ConfigError(EvicoError, ValueError):
    pass


class InvalidLabelError(EvicoError, ValueError):
    pass


class EmptyBatchError(EvicoError, ValueError):
    pass


class UndefinedMetricError(EvicoError, ValueError):
    pass


class EvaluationError(EvicoError, RuntimeError):
    pass


class TrainingDiverged(EvicoError, RuntimeError):
    """Raised when a loss becomes non-finite; carries the offending log row."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
