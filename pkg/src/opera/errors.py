"""Exception hierarchy shared by every module."""


class OperaError(Exception):
    """Base class for all package errors."""


class ShapeError(OperaError, ValueError):
    pass


class NumericError(OperaError, ArithmeticError):
    pass


class ConsistencyError(OperaError, ValueError):
    """A label set breaks the instance -> class hierarchy."""


class DegenerateError(OperaError, ValueError):
    """A similarity row or batch has no positives or no negatives."""


class LabelError(OperaError, ValueError):
    pass


class StateError(OperaError, RuntimeError):
    pass


class ConfigError(OperaError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataFormatError(OperaError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SamplingError(OperaError, ValueError):
    pass


class CheckpointError(OperaError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DivergenceError(NumericError):
    def __init__(self, message, epoch, last_good_epoch):
        super().__init__(message)
        self.epoch = epoch
        self.last_good_epoch = last_good_epoch
