"""Exception types shared across the package."""


class DragEditError(Exception):
    """Base class for all dragedit errors."""


class VocabularyError(DragEditError):
    """Prompt contains a word outside the toy vocabulary."""


class MaskError(DragEditError):
    """Mask is malformed (non-binary, empty where content is required, bad shape)."""


class ShapeMismatchError(DragEditError):
    """Array arguments disagree on shape."""


class ScheduleMismatchError(DragEditError):
    """Two trajectories or a trajectory and a backbone disagree on the schedule."""


class InversionError(DragEditError):
    """DDPM inversion failed (e.g. non-finite noise prediction at some step)."""


class InjectionError(DragEditError):
    """Attention override targets an undeclared layer or carries wrong shapes."""


class GuidanceError(DragEditError):
    """An energy term or its gradient is non-finite or otherwise invalid."""


class StageError(DragEditError):
    """Wraps a failure inside a pipeline stage with the stage name attached."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class EditSpecError(DragEditError):
    """An edit spec violates the JSON schema; carries (json-pointer, message) pairs."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(f"{ptr or '/'}: {msg}" for ptr, msg in self.violations)
        super().__init__(f"invalid edit spec: {lines}")
