"""
Degree control over a finished (or running) optimization: training curves
and checkpoint prompts sampled from intermediate steps.
"""
import logging
from pathlib import Path
from typing import Literal

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from profile_tuner.backend import ChatBackend
from profile_tuner.errors import DataError, DomainError, StateError, StepLookupError
from profile_tuner.prompts import DEFAULT_SUMMARY_TEMPLATE
from profile_tuner.pydantic_models import (
    Checkpoint, CheckpointSummary, Curve, CurvePoint, TraitDimension, TrajectoryBuffer,
)
from profile_tuner.utils import derive_seed, load_json, write_json

logger = logging.getLogger(__name__)

# Linear traits keep rising over 25 steps; plateau traits saturate by step 15.
CHECKPOINT_PRESETS = {
    "linear": (6, 16, 24),
    "plateau": (5, 10, 15),
}


def preset_for(trait: TraitDimension) -> tuple[int, ...]:
    return CHECKPOINT_PRESETS["plateau" if trait.plateaus else "linear"]


def trailing_average(values: list[float], window: int) -> list[float]:
    """Trailing moving average; the first points average over what is available."""
    if window < 1:
        raise DomainError(f"smoothing window must be >= 1, got {window}")
    return [float(np.mean(values[max(0, i - window + 1):i + 1])) for i in range(len(values))]


def curve(
    buffer: TrajectoryBuffer,
    window: int = 8,
    statistic: Literal["mean", "max"] = "mean",
) -> Curve:
    """Per-step mean (or max) s_ps of the generated candidates, with trailing smoothing."""
    if window < 1:
        raise DomainError(f"smoothing window must be >= 1, got {window}")
    steps = [s for s in buffer.steps() if s >= 1]
    if not steps:
        raise StateError("buffer has no generated steps to plot")
    reduce = np.mean if statistic == "mean" else np.max
    points = [CurvePoint(step=s, value=float(reduce([e.s_ps for e in buffer.at_step(s)]))) for s in steps]
    smoothed = trailing_average([p.value for p in points], window)
    return Curve(
        trait=buffer.entries[0].trait,
        statistic=statistic,
        window=window,
        points=points,
        smoothed=[CurvePoint(step=p.step, value=v) for p, v in zip(points, smoothed)],
    )


def render_curves(curves: list[Curve], path: str | Path) -> None:
    """Line plot of smoothed curves (raw points faded); deterministic SVG output."""
    plt.rcParams["svg.hashsalt"] = "profile-tuner"
    fig, ax = plt.subplots(figsize=(8, 5))
    for item in curves:
        steps = [p.step for p in item.points]
        line, = ax.plot(steps, [p.value for p in item.smoothed], label=f"{item.trait.code} ({item.statistic}, w={item.window})")
        ax.plot(steps, [p.value for p in item.points], color=line.get_color(), alpha=0.25, linewidth=1)
    ax.set_xlabel("Step")
    ax.set_ylabel("s_ps")
    ax.set_ylim(0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def checkpoints(buffer: TrajectoryBuffer, steps: list[int], seed: int) -> list[Checkpoint]:
    """
    One prompt per requested step, drawn uniformly among that step's
    candidates with a seed derived from (seed, step).

    Raises:
        StepLookupError: a requested step has no entries in the buffer
    """
    selected = []
    for step in steps:
        entries = buffer.at_step(step)
        if not entries:
            raise StepLookupError(step)
        rng = np.random.default_rng(derive_seed(seed, "checkpoint", step))
        pick = entries[int(rng.integers(len(entries)))]
        selected.append(Checkpoint(
            step=step,
            trait=pick.trait,
            prompt=pick.prompt,
            s_ps=pick.s_ps,
            question_sample=pick.question_sample,
            seed=seed,
        ))
    return selected


def checkpoint_path(directory: str | Path, step: int) -> Path:
    return Path(directory) / f"step-{step}.json"


def export_checkpoints(items: list[Checkpoint], directory: str | Path) -> list[Path]:
    paths = []
    for item in items:
        path = checkpoint_path(directory, item.step)
        write_json(path, item)
        paths.append(path)
    return paths


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = load_json(path)
    if data is None:
        raise DataError(f"checkpoint not found: {path}")
    return Checkpoint.model_validate(data)


def summarize_checkpoints(
    items: list[Checkpoint],
    backend: ChatBackend,
    template: str = DEFAULT_SUMMARY_TEMPLATE,
    max_in_flight: int = 4,
) -> list[CheckpointSummary]:
    """One-sentence summary per checkpoint; a failing call only affects its own checkpoint."""
    if not items:
        return []
    requests = [
        backend.request(user=template.format(profile=item.prompt.text), temperature=0.0, max_tokens=128)
        for item in items
    ]
    responses = backend.complete_batch(requests, max_in_flight=max_in_flight, return_exceptions=True)

    summaries = []
    for item, response in zip(items, responses):
        if isinstance(response, Exception):
            logger.warning(f"Summary for step {item.step} failed: {response}")
            summaries.append(CheckpointSummary(step=item.step, error=f"{type(response).__name__}: {response}"))
            continue
        text = response.text.strip()
        summaries.append(CheckpointSummary(step=item.step, summary=text.splitlines()[0].strip() if text else ""))
    return summaries


def attach_summaries(items: list[Checkpoint], summaries: list[CheckpointSummary]) -> list[Checkpoint]:
    by_step = {s.step: s.summary for s in summaries if s.summary is not None}
    return [item.model_copy(update={"summary": by_step.get(item.step, item.summary)}) for item in items]

