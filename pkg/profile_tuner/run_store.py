"""
Run directory persistence.

Layout:
    config.json           RunConfig snapshot (its hash guards resumption)
    split-manifest.json   train/test ids used by the run
    buffer.jsonl          every scored prompt, appended once per step
    steps.jsonl           one progress record per completed step
    transcript/           content-addressed cache of every backend call
    checkpoints/          exported checkpoint prompts
    result.json           OptimizationResult (Q* and full trajectory)
"""
import logging
from pathlib import Path
from typing import Optional

from profile_tuner.errors import DataError, IntegrityError
from profile_tuner.pydantic_models import (
    OptimizationResult, RunConfig, ScoredPrompt, SplitManifest, StepRecord, TrajectoryBuffer,
)
from profile_tuner.utils import load_json, read_jsonl, write_json, write_jsonl

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
MANIFEST_FILE = "split-manifest.json"
BUFFER_FILE = "buffer.jsonl"
STEPS_FILE = "steps.jsonl"
RESULT_FILE = "result.json"
TRANSCRIPT_DIR = "transcript"
CHECKPOINT_DIR = "checkpoints"
TRACE_FILE = "llm_traces.jsonl"


class RunStore:
    """Single-writer access to one run directory."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)

    @property
    def transcript_dir(self) -> Path:
        return self.run_dir / TRANSCRIPT_DIR

    @property
    def checkpoint_dir(self) -> Path:
        return self.run_dir / CHECKPOINT_DIR

    @property
    def trace_file(self) -> Path:
        return self.run_dir / TRACE_FILE

    @property
    def exists(self) -> bool:
        return (self.run_dir / CONFIG_FILE).exists()

    # ----- config and manifest -----

    def initialize(self, config: RunConfig, manifest: Optional[SplitManifest] = None) -> None:
        """Create the run directory, or verify that an existing one belongs to this config."""
        if self.exists:
            self.verify(config)
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_json(self.run_dir / CONFIG_FILE, config)
        if manifest is not None:
            write_json(self.run_dir / MANIFEST_FILE, manifest)
        logger.info(f"Initialized run directory {self.run_dir} (config {config.config_hash()[:12]})")

    def load_config(self) -> RunConfig:
        data = load_json(self.run_dir / CONFIG_FILE)
        if data is None:
            raise DataError(f"{self.run_dir} is not a run directory (no {CONFIG_FILE})")
        return RunConfig.model_validate(data)

    def verify(self, config: RunConfig) -> None:
        stored = self.load_config()
        if stored.config_hash() != config.config_hash():
            raise IntegrityError(
                f"run {self.run_dir} was started with config {stored.config_hash()[:12]}, "
                f"refusing to resume with {config.config_hash()[:12]}"
            )

    def load_manifest(self) -> Optional[SplitManifest]:
        data = load_json(self.run_dir / MANIFEST_FILE)
        return SplitManifest.model_validate(data) if data is not None else None

    # ----- progress -----

    def append_step(self, entries: list[ScoredPrompt], record: StepRecord) -> None:
        """Persist one step: buffer entries first, then the progress record that commits them."""
        write_jsonl(self.run_dir / BUFFER_FILE, entries, append=True)
        write_jsonl(self.run_dir / STEPS_FILE, [record], append=True)

    def load_progress(self) -> tuple[TrajectoryBuffer, list[StepRecord]]:
        """
        Reload the buffer and step records. Buffer entries written after the
        last committed record (a crash between the two writes) are discarded
        and the buffer file is rewritten without them.
        """
        steps_path = self.run_dir / STEPS_FILE
        buffer_path = self.run_dir / BUFFER_FILE
        records = [StepRecord.model_validate(r) for _, r in read_jsonl(steps_path)] if steps_path.exists() else []
        entries = [ScoredPrompt.model_validate(r) for _, r in read_jsonl(buffer_path)] if buffer_path.exists() else []

        last = records[-1].step if records else -1
        committed = [e for e in entries if e.step <= last]
        if len(committed) != len(entries):
            logger.warning(f"Discarding {len(entries) - len(committed)} uncommitted buffer entries after step {last}")
            write_jsonl(buffer_path, committed)
        return TrajectoryBuffer(entries=committed), records

    def load_buffer(self) -> TrajectoryBuffer:
        return self.load_progress()[0]

    # ----- result -----

    def write_result(self, result: OptimizationResult) -> None:
        write_json(self.run_dir / RESULT_FILE, result.model_copy(update={"run_dir": None}))

    def load_result(self) -> OptimizationResult:
        data = load_json(self.run_dir / RESULT_FILE)
        if data is None:
            raise DataError(f"run {self.run_dir} has no {RESULT_FILE}; it has not completed")
        return OptimizationResult.model_validate(data).model_copy(update={"run_dir": self.run_dir})
