"""
Artifact logger for tracing LLM requests and responses.

Logs Pydantic models to a separate JSONL file for analysis and debugging.
Each log entry is wrapped in a LogEnvelope with run_id for traceability.
"""
import logging
from pathlib import Path
from typing import Generic, TypeVar
from pydantic import BaseModel
from profile_tuner.logging_context import get_run_id

T = TypeVar('T', bound=BaseModel)

TRACER_NAME = "artifact_tracer"


class LogEnvelope(BaseModel, Generic[T]):
    """
    Wrapper for logged artifacts with run context.
    
    Attributes:
        run_id: Short run ID for tracing
        artifact_type: Type of artifact being logged (e.g., "llm_call")
        payload: The actual Pydantic model being logged
    """
    run_id: str
    artifact_type: str
    payload: T


def setup_artifact_logger(log_file: str | Path = "logs/llm_traces.jsonl") -> None:
    """
    Point the artifact logger at a JSONL file. Calling it again with another
    path (e.g. a new run directory) swaps the handler.
    
    Args:
        log_file: Path to JSONL log file for artifacts
    """
    log_file = Path(log_file)
    log_file.parent.mkdir(parents=True, exist_ok=True)
    logger = logging.getLogger(TRACER_NAME)
    logger.propagate = False  # Don't spam console
    
    for handler in list(logger.handlers):
        if getattr(handler, "baseFilename", None) == str(log_file.resolve()):
            return
        logger.removeHandler(handler)
        handler.close()
    
    handler = logging.FileHandler(log_file, mode='a', encoding='utf-8')
    handler.setFormatter(logging.Formatter('%(message)s'))  # Pure JSON, no prefix
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG)


def log_llm_artifact(model: BaseModel, artifact_type: str) -> None:
    """
    Log a Pydantic model as an artifact with run context.
    
    Args:
        model: Pydantic model to log (e.g., a traced chat call)
        artifact_type: Human-readable type identifier
    """
    logger = logging.getLogger(TRACER_NAME)
    if not logger.handlers:
        return
    
    envelope = LogEnvelope(
        run_id=get_run_id() or "unknown",
        artifact_type=artifact_type,
        payload=model
    )
    
    logger.debug(envelope.model_dump_json())
