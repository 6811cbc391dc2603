"""Exception hierarchy shared by every module."""


class SkdError(Exception):
    """Base class for all library errors."""


class ShapeError(SkdError, ValueError):
    pass


class NumericError(SkdError, ArithmeticError):
    pass


class ZeroNormError(NumericError):
    pass


class ContractError(SkdError, ValueError):
    pass


class InputError(SkdError, ValueError):
    pass


class DataError(SkdError, ValueError):
    pass


class IoError(SkdError, OSError):
    pass


class FormatError(SkdError, ValueError):
    pass


class MetricError(SkdError, ValueError):
    pass


class ConfigError(SkdError, ValueError):
    pass
