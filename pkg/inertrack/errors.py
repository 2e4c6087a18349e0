"""Exception hierarchy for the :mod:`inertrack` package."""

from __future__ import annotations

from typing import Iterable, Optional, Sequence


class InertrackError(Exception):
    """Base exception for the inertial tracking toolkit."""


class SequenceParseError(InertrackError, ValueError):
    """Raised when a sequence file does not match the CSV schema."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None) -> None:
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")
        self.row = row
        self.column = column


class ShapeError(InertrackError, ValueError):
    """Raised when tensor operands have incompatible shapes."""

    def __init__(self, op: str, *shapes: Sequence[int]) -> None:
        rendered = " and ".join(str(tuple(shape)) for shape in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")
        self.op = op
        self.shapes = tuple(tuple(shape) for shape in shapes)


class CheckpointError(InertrackError):
    """Raised when a checkpoint cannot be read or does not match the model."""


class ConfigError(InertrackError, ValueError):
    """Raised with every problem found while validating a run configuration."""

    def __init__(self, problems: Iterable[str]) -> None:
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


class FilterDivergenceError(InertrackError):
    """Raised when the EKF covariance stops being positive definite."""


class SequenceTooShortError(InertrackError, ValueError):
    """Raised when a record or trajectory is shorter than a required span."""

    def __init__(self, what: str, required: int, available: int, hint: str = "") -> None:
        message = f"{what} needs at least {required} samples, got {available}"
        if hint:
            message = f"{message}; {hint}"
        super().__init__(message)
        self.required = required
        self.available = available
