"""Exception hierarchy shared by every module of the package."""


class MsaError(Exception):
    """Base class for all package errors."""


class DimensionError(MsaError, ValueError):
    pass


class ParameterError(MsaError, ValueError):
    pass


class ContractError(MsaError, ValueError):
    pass


class EvaluationError(MsaError, ArithmeticError):
    pass


class NumericalError(MsaError, ArithmeticError):
    pass


class ConfigurationError(MsaError, ValueError):
    pass


class InputError(MsaError, ValueError):
    pass


class SpecError(MsaError, ValueError):
    """Invalid synthetic dataset description."""


class FormatError(MsaError, ValueError):
    """A binary file does not start with the expected magic bytes."""


class TruncationError(FormatError):
    pass


class VersionError(FormatError):
    pass


class EndiannessError(FormatError):
    """The file was written with the other byte order."""
