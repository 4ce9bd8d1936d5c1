from typing import Optional
from pathlib import Path
import logging
import sys
from profile_tuner.config import settings
from profile_tuner.logging_context import RunIdFilter
from profile_tuner.artifact_logger import setup_artifact_logger

def build_root_logger(
    log_file_path: Optional[str | Path] = None,
    trace_file_path: Optional[str | Path] = None,
    level: int = logging.INFO,
) -> None:
    if log_file_path is None:
        log_file_path = settings.LOGS_DIR / 'profile_tuner.log'
    log_file_path = Path(log_file_path)
    log_file_path.parent.mkdir(parents=True, exist_ok=True)
    
    # Create handlers
    file_handler = logging.FileHandler(log_file_path, encoding='utf-8')
    stream_handler = logging.StreamHandler(sys.stdout)
    
    # Add run ID filter to all handlers
    run_filter = RunIdFilter()
    file_handler.addFilter(run_filter)
    stream_handler.addFilter(run_filter)
    
    logging.basicConfig(
        level=level,
        format='%(asctime)s - [%(run_id)s] - %(name)s - %(levelname)s - %(message)s',
        handlers=[file_handler, stream_handler],
        force=True,
    )
    
    # Setup artifact logger for LLM traces
    setup_artifact_logger(trace_file_path or log_file_path.parent / 'llm_traces.jsonl')
    
    logging.getLogger("httpcore").setLevel(logging.WARNING)
    logging.getLogger("httpx").setLevel(logging.WARNING)
    logging.getLogger("openai").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
