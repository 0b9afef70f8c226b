"""Exception hierarchy shared by every stage."""


class HVMFlowError(Exception):
    """Base class for all library errors."""


class FormatError(HVMFlowError, ValueError):
    """Malformed input data or file; carries an optional line/offset."""

    def __init__(self, message, line=None, offset=None):
        self.line = line
        self.offset = offset
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (byte offset {offset})"
        super().__init__(message + where)


class ShapeError(HVMFlowError, ValueError):
    pass


class DomainError(HVMFlowError, ValueError):
    """Argument outside the domain of a loss (e.g. log singularity)."""


class DegenerateWeightsError(HVMFlowError, ValueError):
    pass


class EmptyMaskError(HVMFlowError, ValueError):
    pass


class EmptyInputError(HVMFlowError, ValueError):
    pass


class ConfigError(HVMFlowError, ValueError):
    pass


class NumericalError(HVMFlowError, ArithmeticError):
    """NaN or Inf detected in a computed quantity."""


class StageError(HVMFlowError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
