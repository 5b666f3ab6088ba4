"""
tools/errors.py
Exception hierarchy shared by the numerical workers and the CLI.

Every error carries the process exit code the CLI maps it to:
  1  an enabled PASS-gated check failed
  2  usage, configuration or budget error
  3  numerical abort (blow-up, singular regression, divergent fixed point)
"""

from typing import Optional


class LabError(Exception):
    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class CheckFailed(LabError):
    exit_code = 1


class ConfigError(LabError):
    exit_code = 2


class InvalidArgument(LabError, ValueError):
    exit_code = 2


class ShapeError(InvalidArgument):
    pass


class BudgetExceeded(LabError):
    exit_code = 2

    def __init__(self, message: str, requested: int = 0, budget: int = 0):
        super().__init__(message)
        self.requested = requested
        self.budget = budget


class NumericalAbort(LabError):
    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class RegressionError(NumericalAbort):
    def __init__(self, message: str, condition_number: float = float("nan"),
                 step: Optional[int] = None):
        super().__init__(f"{message}; condition number {condition_number:.3e}", step)
        self.condition_number = condition_number


class PicardError(NumericalAbort):
    def __init__(self, message: str, contraction: float = float("nan"),
                 step: Optional[int] = None):
        super().__init__(f"{message}; contraction estimate {contraction:.3e}", step)
        self.contraction = contraction


class StepSizeCollapse(LabError):
    exit_code = 1

    def __init__(self, message: str, step_size: float):
        super().__init__(message)
        self.step_size = step_size


def require(condition: bool, message: str) -> None:
    """Raise InvalidArgument with `message` unless `condition` holds."""
    if not condition:
        raise InvalidArgument(message)
