"""Exception taxonomy shared across the package."""


class CombineCastError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(CombineCastError):
    """A CSV file is missing required columns or is otherwise malformed."""


class ParseError(CombineCastError):
    """A field (quarter label, number, date) could not be parsed."""


class DomainError(CombineCastError):
    """A value is outside its mathematical domain (e.g. nonpositive level)."""


class ConfigError(CombineCastError):
    """A configuration value is invalid or inconsistent."""


class ContractError(CombineCastError):
    """An internal precondition was violated by the caller."""


class CalibrationError(CombineCastError):
    """Surrogate scale calibration failed for the given interval."""


class ConvergenceError(CombineCastError):
    """An iterative solver hit its iteration cap before converging."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
