"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all dermsynth errors."""


class ConfigError(PipelineError, ValueError):
    """Invalid configuration or violated precondition, detected before work starts."""


# spec files
class MalformedFile(PipelineError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)
        self.line = line
        self.column = column


class MissingField(PipelineError):
    def __init__(self, field: str, condition: str | None = None):
        who = f" in condition {condition!r}" if condition else ""
        super().__init__(f"missing required field {field!r}{who}")
        self.field = field
        self.condition = condition


class DuplicateLabel(PipelineError):
    pass


class EmptyPool(PipelineError):
    def __init__(self, pool: str, condition: str):
        super().__init__(f"pool {pool!r} is empty for condition {condition!r}")
        self.pool = pool
        self.condition = condition


# generation backends
class BackendUnavailable(PipelineError):
    """Transient backend failure; the request may be retried."""


class BackendRejected(PipelineError):
    """The backend refused the prompt; retrying the same request is pointless."""


class DecodeError(PipelineError):
    pass


class AuthError(PipelineError):
    pass


# data
class EmptyClass(PipelineError):
    pass


class UnreadableImage(PipelineError):
    def __init__(self, path, reason: str = ""):
        super().__init__(f"cannot read image {path}" + (f": {reason}" if reason else ""))
        self.path = path


class MaskOutOfBounds(PipelineError):
    pass


class InsufficientClassSize(PipelineError):
    pass


# training / evaluation
class ManifestMismatch(PipelineError):
    pass


class LabelMismatch(PipelineError):
    pass


class UnknownClass(PipelineError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class IncompatibleCheckpoint(PipelineError):
    pass


class IoError(PipelineError, OSError):
    pass


class StageError(PipelineError):
    """Wraps an error raised inside an experiment stage, tagging the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
