"""Exception and warning types shared across the package."""


class ConfigError(Exception):
    """Invalid configuration, usage, or input files. CLI exit code 2."""


class ParseError(ConfigError):
    """A dataset or config file on disk is malformed."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class EmptyInputError(ContractError):
    """An operation received an empty set where at least one element is required."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or an otherwise unusable value. CLI exit code 3."""


class NumericWarning(UserWarning):
    """Numerically suspect but recoverable event (guarded division, clamped log)."""
