"""
Exception hierarchy shared by the library and the command line.
Each class carries the process exit code the CLI reports for it.
"""
from __future__ import annotations
from typing import Any, Optional


class DDSSError(Exception):
    """Base class for every error raised on purpose by this package."""
    exit_code = 1


class ConfigError(DDSSError):
    exit_code = 2

    def __init__(self, message: str, *, field: Optional[str] = None, suggestion: Optional[str] = None):
        self.field = field
        self.suggestion = suggestion
        if suggestion:
            message = f"{message} (did you mean '{suggestion}'?)"
        super().__init__(message)


class FingerprintMismatchError(DDSSError):
    exit_code = 3

    def __init__(self, expected: str, found: str, what: str = 'sampler checkpoint'):
        self.expected = expected
        self.found = found
        super().__init__(
            f"schedule fingerprint mismatch for {what}: schedule has {expected}, checkpoint has {found}"
        )


class FormatError(DDSSError):
    """Unreadable or malformed checkpoint/CSV input."""
    exit_code = 4


# tensorgrad

class TensorShapeError(DDSSError):
    def __init__(self, op: str, *shapes: Any, detail: str = ''):
        self.op = op
        self.shapes = shapes
        shown = ', '.join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TensorDomainError(DDSSError):
    pass


class TapeUsageError(DDSSError):
    pass


class CheckpointIntegrityError(DDSSError):
    pass


# diffusion / ggdm / samplers

class ScheduleError(DDSSError):
    pass


class StructuralError(DDSSError):
    pass


class SingularityError(DDSSError):
    pass


class InitializationError(DDSSError):
    def __init__(self, name: str, value: float, where: str):
        self.name = name
        self.value = value
        self.where = where
        super().__init__(f"cannot initialise {name}={value!r} at {where}: target must lie in (0, 1)")


class DivergedError(DDSSError):
    """Non-finite loss. `last_good` is the state before the failing step;
    the CLI records where it wrote it in `saved_to`."""
    what = 'optimisation'

    def __init__(self, step: int, loss: float, last_good: Any = None):
        self.step = step
        self.loss = loss
        self.last_good = last_good
        self.saved_to: Optional[str] = None
        super().__init__(step, loss)

    def __str__(self) -> str:
        message = f"{self.what} diverged at step {self.step}: loss={self.loss!r}"
        if self.saved_to:
            message += f"; last good state written to {self.saved_to}"
        return message


class TrainingDivergedError(DivergedError):
    what = 'training'


class SearchDivergedError(DivergedError):
    what = 'sampler search'


class InvariantViolation(DDSSError):
    pass


class DomainError(DDSSError):
    """A sampler coefficient outside its admissible range."""
