"""Exception types shared across the package."""

from __future__ import annotations


class ShotMetaError(Exception):
    """Base class for all package errors."""


class ShapeError(ShotMetaError, ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = "") -> None:
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(ShotMetaError, FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, detail: str = "") -> None:
        self.op = op
        msg = f"{op}: non-finite value produced"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GraphError(ShotMetaError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar root, foreign graph, ...)."""


class ConfigError(ShotMetaError, ValueError):
    """Invalid configuration. ``errors`` lists every problem found."""

    def __init__(self, errors: list[str] | str) -> None:
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class InnerLoopError(ShotMetaError, FloatingPointError):
    """Inner-loop adaptation produced a non-finite loss or diverged."""

    def __init__(self, step: int, reason: str) -> None:
        self.step = step
        self.reason = reason
        super().__init__(f"inner step {step}: {reason}")


class TaskError(ShotMetaError):
    """Wraps an error raised while processing one task of a meta-batch."""

    def __init__(self, task_index: int, cause: Exception) -> None:
        self.task_index = task_index
        self.cause = cause
        super().__init__(f"task {task_index}: {cause}")
