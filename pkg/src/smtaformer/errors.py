"""Exception hierarchy shared across the package.

The CLI maps each family to its own exit code, so new errors should subclass
one of the three family bases rather than ``Exception`` directly.
"""


class SmtaformerError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SmtaformerError, ValueError):
    """Invalid configuration or arguments (bad sizes, unknown options)."""


class DataError(SmtaformerError, ValueError):
    """Problems with input data or pipeline ordering."""


class NumericError(SmtaformerError, ArithmeticError):
    """Non-finite values or failed numerical checks."""


class DimensionError(ConfigurationError):
    pass


class RankError(DimensionError):
    pass


class EmptySequenceError(DataError):
    pass


class PipelineOrderError(DataError):
    pass


class DataIntegrityError(DataError):
    pass


class SchemaError(DataError):
    pass
