"""Exception types shared across the package.

Each class maps to one machine-readable error category used by the CLI exit codes.
"""


class QuantAttackError(Exception):
    category = "error"


class DimensionError(QuantAttackError, ValueError):
    category = "dimension"


class ContractError(QuantAttackError, RuntimeError):
    category = "contract"


class NumericError(QuantAttackError, ArithmeticError):
    category = "numeric"


class ConfigError(QuantAttackError, ValueError):
    category = "config"


class FormatError(QuantAttackError, ValueError):
    category = "format"


class CheckpointError(QuantAttackError, ValueError):
    category = "load"
