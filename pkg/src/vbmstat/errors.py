"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for bad input data, 4 for numerical failures.
"""


class VbmError(Exception):
    exit_code = 3


class ConfigError(VbmError):
    exit_code = 2


class DataError(VbmError):
    exit_code = 3


class NumericalError(VbmError):
    exit_code = 4


class NiftiFormatError(DataError):
    pass


class UnsupportedShapeError(DataError):
    pass


class DatatypeError(DataError):
    pass


class ConformabilityError(DataError):
    pass


class EmptyMaskError(DataError):
    pass


class CohortError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class EstimabilityError(DataError):
    """A factorial cell or stratum has no observations."""


class InsufficientDfError(NumericalError):
    pass


class ContrastNotEstimableError(NumericalError):
    pass


class DegenerateRoiError(NumericalError):
    pass


class SmoothnessUndefinedError(NumericalError):
    pass


class UndefinedEffectError(NumericalError):
    pass
