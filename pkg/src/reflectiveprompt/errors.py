"""Exception hierarchy shared across the package."""


class ReflectiveError(Exception):
    """Base class for all package errors."""


class ValidationError(ReflectiveError):
    """A value violates its documented bounds or invariants."""


class UsageError(ReflectiveError):
    """An operation was called in a way its contract forbids."""


class BudgetExhaustedError(ReflectiveError):
    """The LLM call budget has been spent; the run must stop gracefully."""


class TransientBackendError(ReflectiveError):
    """A retryable transport-level failure (timeouts, 429, 5xx)."""


class BackendError(ReflectiveError):
    """A persistent backend failure after retries were exhausted."""


class MalformedOutputError(ReflectiveError):
    """The backend returned empty or unusable text for a completion."""


class OperatorError(ReflectiveError):
    """An LLM operator failed after its reprompt budget.

    Carries the last raw backend text so callers can diagnose the failure.
    """

    def __init__(self, message: str, raw_text: str | None = None):
        super().__init__(message)
        self.raw_text = raw_text


class CheckpointVersionError(ReflectiveError):
    """Checkpoint file carries an unsupported schema version."""


class CheckpointIntegrityError(ReflectiveError):
    """Checkpoint file is truncated, corrupt, or fails its digest check."""
