"""Exception taxonomy. Each class carries the CLI exit code for its failure class."""
from typing import Any, Optional


class ProfileTunerError(Exception):
    """Base class for all expected failures."""
    exit_code: int = 1


class DataError(ProfileTunerError):
    """Invalid or insufficient input data (item banks, buffers, manifests)."""
    exit_code = 2

    def __init__(self, message: str, violations: Optional[list[str]] = None):
        super().__init__(message)
        self.violations = violations or []


class FormatError(DataError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        super().__init__(message if line_number is None else f"line {line_number}: {message}")
        self.line_number = line_number


class CapacityError(DataError):
    """Not enough items to satisfy a split or sample request."""


class StateError(DataError):
    """Operation called on an object in the wrong state (e.g. an empty buffer)."""


class StepLookupError(DataError):
    """A requested optimization step is absent from the buffer."""

    def __init__(self, step: int):
        super().__init__(f"step {step} not present in buffer")
        self.step = step


class DomainError(DataError, ValueError):
    """Argument outside its mathematical domain."""


class ConfigurationError(ProfileTunerError):
    """Bad configuration or a non-retryable client error from an endpoint."""
    exit_code = 3


class TransportError(ProfileTunerError):
    """Backend call failed after retries were exhausted."""
    exit_code = 4


class IntegrityError(ProfileTunerError):
    """Persisted state disagrees with what is expected (cache, resumed run)."""
    exit_code = 5


class BatchCompletionError(TransportError):
    """One or more members of a batch failed; the others completed."""

    def __init__(self, failures: dict[int, Exception], responses: list[Any]):
        indices = ", ".join(str(i) for i in sorted(failures))
        super().__init__(f"{len(failures)} of {len(responses)} requests failed (indices: {indices})")
        self.failures = failures
        self.responses = responses
