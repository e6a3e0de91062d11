"""Exception hierarchy shared by every module."""


class SelfStrAEError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SelfStrAEError, ValueError):
    pass


class VocabError(SelfStrAEError, ValueError):
    pass


class ShapeError(SelfStrAEError, ValueError):
    pass


class InputError(SelfStrAEError, ValueError):
    pass


class UsageError(SelfStrAEError, ValueError):
    pass


class NumericError(SelfStrAEError, ArithmeticError):
    pass


class ParseError(SelfStrAEError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class CheckpointError(SelfStrAEError):
    pass


class EvaluationError(SelfStrAEError):
    pass


class UndefinedCorrelation(EvaluationError):
    """Raised when a rank correlation is requested for a constant vector."""
