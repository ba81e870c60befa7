"""
Error Hierarchy.

Every failure the toolkit raises on purpose derives from `ConvFormerError`, so the CLI
can map whole families of problems to exit codes:

- configuration / data problems   -> exit 2
- numeric aborts (NaN, Inf)       -> exit 3

The concrete classes also subclass the closest builtin (`ValueError`, `RuntimeError`,
`ArithmeticError`) so callers that only know the builtins still catch them.
"""

from __future__ import annotations

from typing import Optional


class ConvFormerError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(ConvFormerError, ValueError):
    """Shapes, ranks or token bookkeeping do not line up."""


class NumericError(ConvFormerError, ArithmeticError):
    """A computation produced NaN or Inf."""


class StateError(ConvFormerError, RuntimeError):
    """An object was used before it reached the state the call needs."""


class ConfigError(ConvFormerError, ValueError):
    """
    Invalid configuration.

    Attributes:
        key (Optional[str]): The offending config key, when known.
        line (Optional[int]): 1-based line number in the config file, when known.
    """

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        location = f"line {line}: " if line is not None else ""
        super().__init__(f"{location}{message}")


class DataError(ConvFormerError, ValueError):
    """Input data violates the contract of the operation."""


class EmptyMaskError(DataError):
    """Boundary distances are undefined because one of the masks is empty."""


class RangeError(ConvFormerError, ValueError):
    """A scalar argument is outside the range the operation is defined on."""


class TrainingAborted(NumericError):
    """
    Training hit a non-finite loss.

    Attributes:
        iteration (int): Iteration at which the loss went non-finite.
        batch_seed (int): Seed that regenerates the offending batch.
        dump_path (Optional[str]): Where the offending batch was written, if anywhere.
    """

    def __init__(self, message: str, iteration: int, batch_seed: int, dump_path: Optional[str] = None):
        self.iteration = iteration
        self.batch_seed = batch_seed
        self.dump_path = dump_path
        super().__init__(message)
