"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """Malformed record in a session file; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class DimensionMismatchError(ValidationError):
    """Embedding dimension differs between turns or sessions."""


class EmptySessionError(ValidationError):
    """Session has no complete therapist-client exchange."""


class DegenerateTrainingError(ValidationError):
    """Training set lacks at least one example of each label."""


class InfeasibleSplitError(ValidationError):
    """Fewer client groups than requested folds."""


class UndefinedCorrelationError(ValidationError):
    """Correlation undefined because an input has zero variance."""


class NotFoundError(KeyError):
    """A named entity (session, model file) does not exist."""


class NumericalError(RuntimeError):
    """An iterative numerical routine failed to converge."""

    def __init__(self, message: str, window_ref=None):
        self.window_ref = window_ref
        if window_ref is not None:
            message = f"{message} (window {window_ref})"
        super().__init__(message)


class GenerationError(RuntimeError):
    """Synthetic trajectory became non-finite; carries the failing step."""

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")
