"""Exception taxonomy. ``exit_code`` is what the CLI returns for each class."""


class ESVError(Exception):
    exit_code = 1


class ValidationError(ESVError, ValueError):
    exit_code = 2


class CapacityError(ESVError):
    exit_code = 3


class UndefinedMetricError(ESVError, ArithmeticError):
    exit_code = 4


class FileFormatError(ESVError, OSError):
    exit_code = 5
