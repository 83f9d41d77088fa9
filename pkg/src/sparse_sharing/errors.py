"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries one.
"""


class SparseSharingError(Exception):
    exit_code = 2


class ConfigError(SparseSharingError, ValueError):
    exit_code = 1


class DimensionError(SparseSharingError, ValueError):
    pass


class LabelError(SparseSharingError, ValueError):
    pass


class InputError(SparseSharingError, ValueError):
    pass


class NonFiniteError(SparseSharingError, FloatingPointError):
    pass


class StructuralError(SparseSharingError, ValueError):
    """A mask, checkpoint or ledger does not fit the parameter layout it is used with."""


class FormatError(SparseSharingError, ValueError):
    pass


class UndefinedRatioError(SparseSharingError, ZeroDivisionError):
    pass


class ProgressStallError(SparseSharingError, RuntimeError):
    pass


class SelectionError(SparseSharingError, ValueError):
    pass


class DivergenceError(SparseSharingError, FloatingPointError):
    exit_code = 3


class ParseError(SparseSharingError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class AlignmentError(SparseSharingError, ValueError):
    pass


class IntegrityError(SparseSharingError, RuntimeError):
    pass
