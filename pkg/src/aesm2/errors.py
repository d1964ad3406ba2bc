"""Exception types shared across the package."""


class AESM2Error(Exception):
    pass


class ShapeError(AESM2Error, ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(AESM2Error, ValueError):
    """A caller violated a precondition of an API (non-scalar loss, empty set, ...)."""


class ConfigError(AESM2Error, ValueError):
    pass


class DataError(AESM2Error, ValueError):
    """Bad input data. ``line`` is set when the problem comes from a file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DomainError(AESM2Error, ValueError):
    pass


class UndefinedMetric(AESM2Error, ValueError):
    """AUC asked for on a set that has only one label class."""


class LogFormatError(AESM2Error, ValueError):
    pass


class CheckpointError(AESM2Error, ValueError):
    pass


class TrainingDiverged(AESM2Error, RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
