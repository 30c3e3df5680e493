"""Exception hierarchy. The CLI maps each family onto an exit code."""


class SceneGraphError(Exception):
    """Base class for all library errors."""


class ValidationError(SceneGraphError, ValueError):
    """Bad input: shapes, ranges, malformed files. Exit code 1."""


class DimensionError(ValidationError):
    pass


class EmptyNeighborhoodError(ValidationError):
    pass


class EmptyGraphError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class NumericalError(SceneGraphError, ArithmeticError):
    """Non-finite values, divergence, failed gradient checks. Exit code 2."""


class DivergenceError(NumericalError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) at epoch {epoch}")
