"""Exception hierarchy. CLI exit codes key off these classes."""


class BadFUError(Exception):
    """Base class for all simulator errors."""


class ConfigError(BadFUError, ValueError):
    """Invalid configuration or precondition violation."""


class ShapeError(BadFUError, ValueError):
    pass


class NumericError(BadFUError, ArithmeticError):
    """A loss or intermediate became non-finite."""


class IngestionError(BadFUError, OSError):
    pass


class PartitionError(BadFUError, ValueError):
    pass


class EvaluationError(BadFUError, ValueError):
    pass


class UnlearnRequestRejected(BadFUError, ValueError):
    """Unlearning request violates the legitimacy rule (ids must have been trained on)."""
