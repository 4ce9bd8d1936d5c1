"""
Logging context for run ID tracking.

Uses contextvars for thread-safe storage of the optimization/evaluation run ID
that is attached to all log records via a logging filter.
"""
import logging
from contextvars import ContextVar
from typing import Optional

# Context variable to store the run ID
_run_id: ContextVar[Optional[str]] = ContextVar('run_id', default=None)


def set_run_id(run_id: str) -> None:
    """
    Set the run ID for the current context.
    
    Args:
        run_id: Short identifier of the run (usually the run directory name)
    """
    _run_id.set(run_id)


def get_run_id() -> Optional[str]:
    """Get the current run ID, or None if not set."""
    return _run_id.get()


def clear_run_id() -> None:
    """Clear the run ID from the current context."""
    _run_id.set(None)


class RunIdFilter(logging.Filter):
    """
    Logging filter that adds run_id to all log records.
    
    Worker threads do not inherit the context automatically; callers that fan
    out copy the context (see backend.complete_batch) so records stay tagged.
    """
    
    def filter(self, record: logging.LogRecord) -> bool:
        run_id = get_run_id()
        record.run_id = run_id if run_id else '-'
        return True
