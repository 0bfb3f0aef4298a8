"""Exception types shared across the package."""


class DBiLSTMError(Exception):
    """Base class for package errors."""


class ShapeError(DBiLSTMError, ValueError):
    """Operand extents are incompatible."""


class ContractError(DBiLSTMError, ValueError):
    """A precondition of an operation does not hold."""


class ManifestError(DBiLSTMError, ValueError):
    """Dataset manifest could not be parsed or validated."""


class LoadError(DBiLSTMError, OSError):
    """A binary file (repetition, weights, checkpoint) is unreadable."""


class DataError(DBiLSTMError, ValueError):
    """Requested data is missing or inconsistent with the model."""


class ConfigError(DBiLSTMError, ValueError):
    """Experiment configuration failed schema validation."""


class DivergenceError(DBiLSTMError, ArithmeticError):
    """Training produced a non-finite loss."""
