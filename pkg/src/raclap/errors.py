"""Exception hierarchy shared by every raclap module."""


class RaclapError(Exception):
    """Base class for all raclap errors."""

    exit_code = 2


class ConfigurationError(RaclapError, ValueError):
    pass


class DimensionError(ConfigurationError):
    pass


class ShapeError(DimensionError):
    pass


class ParameterError(RaclapError, ValueError):
    pass


class DegenerateVectorError(RaclapError, ValueError):
    pass


class ContractError(RaclapError, ValueError):
    pass


class EvaluationError(RaclapError, ArithmeticError):
    pass


class DataError(RaclapError, ValueError):
    pass


class FormatError(DataError):
    pass


class CorruptionError(DataError):
    pass


class ManifestError(DataError):
    pass


class MigrationError(DataError):
    pass


class DivergenceError(RaclapError, ArithmeticError):
    """Non-finite loss or gradient during optimization."""

    exit_code = 1
