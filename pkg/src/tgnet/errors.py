"""Exception hierarchy; each class maps to a CLI exit code."""


class TGNetError(Exception):
    exit_code = 1


class ConfigError(TGNetError, ValueError):
    exit_code = 2


class DataError(TGNetError, ValueError):
    exit_code = 3


class NumericalError(TGNetError, ArithmeticError):
    exit_code = 4
