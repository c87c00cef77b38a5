"""Exception types raised across the toolkit."""


class DistillError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DistillError, ValueError):
    """Invalid configuration value. ``field`` is a dotted path when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class IngestionError(DistillError, OSError):
    pass


class ContractError(DistillError, ValueError):
    """An operation was called with arguments violating its contract."""


class DegenerateStatisticsError(ContractError):
    """Second-order statistics requested from fewer than two samples."""


class NumericError(DistillError, ArithmeticError):
    def __init__(self, message, component=None, iteration=None):
        super().__init__(message)
        self.component = component
        self.iteration = iteration


class TrainingError(DistillError, RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class IntegrityError(DistillError, OSError):
    pass
