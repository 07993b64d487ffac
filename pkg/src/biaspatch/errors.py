"""Exception hierarchy.

Validation-type errors subclass :class:`ValidationError` (a ``ValueError``) so
the CLI can map them to a dedicated exit code; everything raised while an
optimisation or pipeline is running subclasses :class:`BiasPatchRuntimeError`.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Bad input: wrong range, non-finite values, inconsistent arguments."""


class InputShapeError(ValidationError):
    pass


class PlacementError(ValidationError):
    pass


class ProtocolError(ValidationError):
    """An evaluation protocol was violated (e.g. class leakage)."""


class CheckpointError(ValidationError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{message} (field: {field})")
        self.field = field


class ConfigError(ValidationError):
    pass


class DatasetMissingError(ValidationError):
    pass


class BiasPatchRuntimeError(RuntimeError):
    pass


class OptimizationError(BiasPatchRuntimeError):
    """Non-finite loss during fusion; ``trace`` holds what was recorded so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class TrainingError(OptimizationError):
    pass


class PrototypeRejectedError(BiasPatchRuntimeError):
    def __init__(self, target: int, final_loss: float, predicted: int):
        super().__init__(
            f"prototype for class {target} rejected: predicted {predicted}, final margin loss {final_loss:.4g}"
        )
        self.target = target
        self.final_loss = final_loss
        self.predicted = predicted


class SetGenerationError(BiasPatchRuntimeError):
    def __init__(self, classes):
        self.classes = sorted(classes)
        super().__init__(f"no prototype could be generated for class(es) {self.classes}")


class StageError(BiasPatchRuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
