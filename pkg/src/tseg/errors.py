"""Exception hierarchy.

Each class carries the process exit code the CLI maps it to.
"""


class TsegError(Exception):
    exit_code = 1


class ContractError(TsegError):
    """A caller violated an operation's preconditions."""

    exit_code = 1


class DimensionError(TsegError, ValueError):
    exit_code = 2


class FormatError(TsegError):
    """A file could not be parsed (bad magic, truncation, unsupported layout)."""

    exit_code = 2


class DegenerateVolumeError(TsegError, ValueError):
    exit_code = 2


class NumericError(TsegError, ArithmeticError):
    """A tensor operation produced NaN or Inf."""

    exit_code = 3


class TrainingError(TsegError):
    """Training diverged; carries the location where the loss went non-finite."""

    exit_code = 3

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class AcceptanceError(TsegError):
    exit_code = 4
