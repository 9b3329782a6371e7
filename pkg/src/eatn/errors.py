"""Exception types shared across the package."""


class EATNError(Exception):
    """Base class for every error raised by eatn."""


class DimensionError(EATNError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(EATNError, ValueError):
    """A configuration value is invalid (bad kernel size, alpha out of range, ...)."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ContractError(EATNError, RuntimeError):
    """A caller violated an operation's precondition."""


class InputError(EATNError, ValueError):
    """User data is malformed (token out of vocabulary, wrong image shape, ...)."""


class CorruptionError(EATNError, IOError):
    """A serialized file is truncated, has bad magic, or fails its checksum."""


class DivergenceError(EATNError, ArithmeticError):
    """Training produced a non-finite loss."""


class GradCheckError(EATNError, AssertionError):
    """Analytic and numerical gradients disagree beyond tolerance."""

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)
