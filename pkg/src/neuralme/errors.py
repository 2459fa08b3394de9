"""Exception hierarchy shared by all neuralme modules."""


class NeuralMEError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(NeuralMEError, ValueError):
    pass


class NonFiniteInput(NeuralMEError, ValueError):
    pass


class NonFiniteResult(NeuralMEError, ArithmeticError):
    pass


class CapabilityMissing(NeuralMEError, NotImplementedError):
    pass


class ParseError(NeuralMEError, ValueError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class ValidationError(NeuralMEError, ValueError):
    pass


class SingularSystem(NeuralMEError, ArithmeticError):
    pass


class MaxStepsExceeded(NeuralMEError, RuntimeError):
    pass


class NonFiniteState(NeuralMEError, ArithmeticError):
    def __init__(self, message, time=None):
        self.time = time
        super().__init__(message)


class StepUnderflow(NeuralMEError, RuntimeError):
    pass


class TapeMissing(NeuralMEError, RuntimeError):
    pass


class InsufficientCycles(NeuralMEError, ValueError):
    pass


class NonUniformInput(NeuralMEError, ValueError):
    pass


class Diverged(NeuralMEError, RuntimeError):
    """Training produced a non-finite loss; ``params`` holds the last finite checkpoint."""

    def __init__(self, message, params=None, epoch=None):
        self.params = params
        self.epoch = epoch
        super().__init__(message)
