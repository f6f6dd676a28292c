"""Exception hierarchy shared by all advleaf modules.

Each class carries the process exit code the command-line front end uses
when the error escapes a command.
"""


class AdvLeafError(Exception):
    exit_code = 1
    code = "E_GENERIC"


class ConfigError(AdvLeafError, ValueError):
    exit_code = 2
    code = "E_CONFIG"


class ShapeError(AdvLeafError, ValueError):
    exit_code = 2
    code = "E_SHAPE"


class GraphError(AdvLeafError, RuntimeError):
    exit_code = 3
    code = "E_GRAPH"


class NumericError(AdvLeafError, ArithmeticError):
    exit_code = 3
    code = "E_NUMERIC"


class DataError(AdvLeafError, ValueError):
    exit_code = 4
    code = "E_DATA"


class FormatError(AdvLeafError, ValueError):
    exit_code = 4
    code = "E_FORMAT"


class UndefinedMetricError(AdvLeafError, ZeroDivisionError):
    exit_code = 3
    code = "E_UNDEFINED_METRIC"
