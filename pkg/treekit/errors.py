"""Exception hierarchy shared by every treekit module.

Each error carries the process exit code the command line reports for it.
"""

from __future__ import annotations

from typing import Optional


class TreekitError(Exception):
    """Base class for all treekit failures."""

    exit_code = 1

    @property
    def kind(self) -> str:
        return type(self).__name__


class ContractViolation(TreekitError, ValueError):
    """A caller broke a documented precondition (shapes, capacity, ranges)."""

    exit_code = 2


class UnsupportedError(TreekitError):
    """The requested combination is deliberately not supported."""

    exit_code = 2


class DataError(TreekitError):
    """Input data could not be read or does not satisfy dataset invariants."""

    exit_code = 3


class IngestionError(DataError):
    pass


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


class NumericAbort(TreekitError):
    """Training produced a non-finite value and was stopped."""

    exit_code = 4

    def __init__(
        self,
        message: str,
        parameter: Optional[str] = None,
        step: Optional[int] = None,
        last_checkpoint: Optional[str] = None,
    ):
        self.reason = message
        details = []
        if parameter is not None:
            details.append(f"parameter={parameter}")
        if step is not None:
            details.append(f"step={step}")
        if last_checkpoint is not None:
            details.append(f"last_checkpoint={last_checkpoint}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.parameter = parameter
        self.step = step
        self.last_checkpoint = last_checkpoint


def format_error_line(error: TreekitError) -> str:
    """Single machine-parsable line used on stderr by the CLI."""
    text = " ".join(str(error).split())
    return f"treekit-error[{error.exit_code}]: {error.kind}: {text}"
