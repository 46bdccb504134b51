"""Exception hierarchy shared by every module."""


class LtoodError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LtoodError, ValueError):
    pass


class NumericError(LtoodError, ArithmeticError):
    pass


class StateError(LtoodError, RuntimeError):
    pass


class ConfigError(LtoodError, ValueError):
    pass


class PartitionError(ConfigError):
    pass


class StrategyError(ConfigError):
    pass


class SplitError(LtoodError, ValueError):
    pass


class ParseError(LtoodError, ValueError):
    pass


class MetricError(LtoodError, ValueError):
    pass


class InitError(LtoodError, ValueError):
    pass


class LoadError(LtoodError, ValueError):
    pass
