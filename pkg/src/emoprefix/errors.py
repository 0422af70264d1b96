"""Exception hierarchy shared by every module.

Each family maps to a distinct CLI exit code (see ``emoprefix.cli``).
"""


class EmoPrefixError(Exception):
    exit_code = 1


class ConfigError(EmoPrefixError, ValueError):
    exit_code = 2


class DataError(EmoPrefixError, ValueError):
    exit_code = 3


class InputError(DataError):
    pass


class StateError(EmoPrefixError, RuntimeError):
    exit_code = 4


class PipelineOrderError(StateError):
    """An upstream artifact is missing or was rebuilt since this one was trained."""


class NumericError(EmoPrefixError, ArithmeticError):
    exit_code = 5


class DimensionError(EmoPrefixError, ValueError):
    exit_code = 2


class DegenerateMaskError(NumericError):
    pass


class FrozenParameterError(EmoPrefixError, AssertionError):
    exit_code = 6
