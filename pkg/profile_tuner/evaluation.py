"""
Condition-based evaluation: baseline prompts, optimized profiles, naive
prompts and checkpoint prompts, evaluated on held-out items per model, and the
cross-model transfer matrix.
"""
import contextvars
import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from itertools import product
from pathlib import Path
from typing import Optional

from profile_tuner.backend import ChatBackend
from profile_tuner.dataset import originals_of, twins_by_source, with_twins
from profile_tuner.errors import DataError, ProfileTunerError
from profile_tuner.optimizer import PromptOptimizer
from profile_tuner.prompts import TRAIT_DESCRIPTIONS
from profile_tuner.pydantic_models import (
    Administration, CellStatus, Checkpoint, Condition, ConditionName, EvaluationConfig,
    EvaluationReport, LikertAdministration, LikertItem, OptimizationResult, PersonaPrompt,
    QuestionItem, RunConfig, ScoringConfig, TraitDimension,
)
from profile_tuner.run_store import RESULT_FILE, RunStore
from profile_tuner.scoring import TraitScorer, likert_report_from, score_set, scored_prompt_from
from profile_tuner.utils import content_hash, load_json, read_jsonl, write_json, write_jsonl

logger = logging.getLogger(__name__)

CELLS_DIR = "cells"
ADMINISTRATION_LOG = "administrations.jsonl"
CELL_REPORT = "report.json"
SELF_TRANSFER_MARK = "—"

_CONDITION_ALIASES = {"dp": ConditionName.DESCRIPTION_PROMPT, "org": ConditionName.ORIGIN}


# ========== Conditions ==========

def parse_condition(spec: str) -> Condition:
    """
    Parse a condition reference such as `origin`, `dp`, `p2`, `naive`,
    `naive:very`, `naive:` (empty prefix), `profile=runs/gpt@gpt-4o-mini`,
    `profile_star=runs/star` or `custom=checkpoints/step-6.json`.
    """
    spec = spec.strip()
    if spec.startswith("naive:"):
        return Condition(name=ConditionName.NAIVE, naive_template="prefix", naive_prefix=spec[len("naive:"):])
    name, _, reference = spec.partition("=")
    key = name.strip().lower()
    try:
        condition_name = _CONDITION_ALIASES.get(key) or ConditionName(key)
    except ValueError as e:
        raise DataError(f"unknown condition {name!r}") from e

    if condition_name == ConditionName.NAIVE:
        return Condition(name=condition_name, naive_template="instruction")
    if not reference:
        return Condition(name=condition_name)

    source_model = None
    if condition_name in (ConditionName.PROFILE, ConditionName.PROFILE_STAR) and "@" in reference:
        reference, source_model = reference.rsplit("@", 1)
    path = Path(reference)
    if condition_name == ConditionName.CUSTOM and not path.exists():
        return Condition(name=condition_name, prompt_text=reference)
    return Condition(name=condition_name, prompt_path=path, source_model=source_model)


def _derived_label(condition: Condition) -> str:
    label = condition.name.value
    if condition.prompt_path is not None:
        label = f"{label}:{condition.prompt_path.stem or condition.prompt_path.name}"
    elif condition.prompt_text:
        label = f"{label}:{content_hash(condition.prompt_text)[:8]}"
    if condition.source_model:
        label = f"{label}@{condition.source_model}"
    return label


def label_conditions(conditions: list[Condition]) -> list[Condition]:
    """
    Conditions sharing a display name get a label built from their prompt
    file, prompt text and source model. Names still shared after that are
    rejected, since cell directories and grid columns are keyed by them.
    """
    shared = Counter(c.display_name for c in conditions)
    labelled = [
        c.model_copy(update={"label": _derived_label(c)}) if shared[c.display_name] > 1 and not c.label else c
        for c in conditions
    ]
    duplicates = sorted(name for name, n in Counter(c.display_name for c in labelled).items() if n > 1)
    if duplicates:
        raise DataError(f"conditions share a display name: {', '.join(duplicates)}")
    return labelled


def _load_run_prompt(path: Path, trait: TraitDimension) -> PersonaPrompt:
    """Q* of the run at `path`, or of `path/<trait code>` when path holds one run per trait."""
    run_dir = path if (path / RESULT_FILE).exists() else path / trait.code
    result = RunStore(run_dir).load_result()
    if result.best.trait != trait:
        raise DataError(f"run {run_dir} optimized {result.best.trait.code}, not {trait.code}")
    return result.best.prompt


def _load_prompt_file(path: Path) -> PersonaPrompt:
    if path.is_dir():
        return RunStore(path).load_result().best.prompt
    if not path.exists():
        raise DataError(f"prompt file not found: {path}")
    if path.suffix != ".json":
        return PersonaPrompt.baseline(path.read_text(encoding="utf-8").strip(), ConditionName.CUSTOM.value)
    data = load_json(path)
    if isinstance(data, dict) and "prompt" in data:
        return Checkpoint.model_validate(data).prompt
    return PersonaPrompt.model_validate(data)


def resolve_prompt(
    condition: Condition,
    trait: TraitDimension,
    config: Optional[EvaluationConfig] = None,
) -> PersonaPrompt:
    """Materialize the persona prompt a condition stands for, for one trait."""
    config = config or EvaluationConfig()
    personality = trait.noun
    kind = condition.name.value

    if condition.name == ConditionName.ORIGIN:
        return PersonaPrompt.origin_baseline()
    if condition.name == ConditionName.DESCRIPTION_PROMPT:
        text = config.description_template.format(personality=personality, description=TRAIT_DESCRIPTIONS[trait.value])
        return PersonaPrompt.baseline(text, kind)
    if condition.name == ConditionName.P2:
        text = config.p2_template.format(personality=personality, description=TRAIT_DESCRIPTIONS[trait.value])
        return PersonaPrompt.baseline(text, kind)
    if condition.name == ConditionName.NAIVE:
        if condition.naive_template == "prefix":
            text = config.naive_prefix_template.format(prefix=condition.naive_prefix or "", personality=personality)
        else:
            text = config.naive_instruction_template.format(personality=personality)
        return PersonaPrompt.baseline(" ".join(text.split()), kind)
    if condition.prompt_text:
        return PersonaPrompt.baseline(condition.prompt_text, kind)
    if condition.name in (ConditionName.PROFILE, ConditionName.PROFILE_STAR):
        return _load_run_prompt(condition.prompt_path, trait)
    return _load_prompt_file(condition.prompt_path)


# ========== Single-cell evaluation ==========

def _slug(value: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", value).strip("_") or "_"


def cell_dir(out_dir: Path, model_id: str, condition: Condition, trait: TraitDimension) -> Path:
    return Path(out_dir) / CELLS_DIR / _slug(model_id) / _slug(condition.display_name) / trait.code


def _require_twins(origins: list[QuestionItem], bank: list[QuestionItem]) -> None:
    twins = twins_by_source(bank)
    missing = [o.id for o in origins if o.id not in twins]
    if missing:
        raise DataError(f"{len(missing)} test items have no paraphrase twin; s_ps is undefined", missing[:20])


def evaluate(
    condition: Condition,
    trait: TraitDimension,
    backend: ChatBackend,
    items: list[QuestionItem] | list[LikertItem],
    seed: int,
    out_dir: Optional[Path] = None,
    config: Optional[EvaluationConfig] = None,
    scoring: Optional[ScoringConfig] = None,
) -> EvaluationReport:
    """
    Evaluate one condition for one trait on one model.

    Situational items take the paraphrase-aware path (s_ps and friends);
    Likert statements take the questionnaire path. With `out_dir`, the full
    administration log and the report are written to the cell directory.
    """
    prompt = resolve_prompt(condition, trait, config)
    scorer = TraitScorer(backend, scoring or ScoringConfig())
    if not items:
        raise DataError("no items to evaluate on")

    if isinstance(items[0], LikertItem):
        likert, log = scorer.likert_with_log(prompt, items, seed)
        stats = likert.per_trait.get(trait.value)
        if stats is None:
            raise DataError(f"Likert bank has no {trait.code} statements")
        report_kwargs = {"likert": stats, "n_items": sum(1 for i in items if i.trait == trait)}
    else:
        origins = originals_of(items, trait)
        if not origins:
            raise DataError(f"no {trait.code} test items")
        _require_twins(origins, items)
        scores, log = scorer.score_with_log(prompt, with_twins(origins, items), seed)
        report_kwargs = {"scores": scores, "n_items": len(origins)}

    log_path = None
    if out_dir is not None:
        target = cell_dir(out_dir, backend.model_id, condition, trait)
        log_path = target / ADMINISTRATION_LOG
        write_jsonl(log_path, log)

    report = EvaluationReport(
        model_id=backend.model_id,
        condition=condition.display_name,
        trait=trait,
        log_path=str(log_path) if log_path else None,
        **report_kwargs,
    )
    if log_path is not None:
        write_json(log_path.parent / CELL_REPORT, report)
    logger.info(f"[{backend.model_id}] {condition.display_name} / {trait.code}: {report.value}")
    return report


def report_from_log(cell_path: str | Path, skip_threshold: float = 0.2) -> EvaluationReport:
    """
    Recompute a cell report from its persisted administration log. The
    recorded report supplies only identifying fields; every number is
    recomputed.
    """
    cell_path = Path(cell_path)
    base = EvaluationReport.model_validate(load_json(cell_path / CELL_REPORT, default={}))
    records = [record for _, record in read_jsonl(cell_path / ADMINISTRATION_LOG)]
    if not records:
        raise DataError(f"empty administration log in {cell_path}")

    if "trial" in records[0]:
        administrations = [LikertAdministration.model_validate(r) for r in records]
        traits = sorted({a.trait for a in administrations}, key=list(TraitDimension).index)
        n_trials = max(a.trial for a in administrations) + 1
        likert = likert_report_from(administrations, traits, n_trials, skip_threshold)
        return base.model_copy(update={"likert": likert.per_trait[base.trait.value], "scores": None})

    administrations = [Administration.model_validate(r) for r in records]
    origin_ids = [a.item_id for a in administrations if a.item_id == a.source_id]
    scores = score_set(administrations, origin_ids, base.trait)
    prompt = base.scores.prompt if base.scores else None
    if prompt is None:
        raise DataError(f"cell report in {cell_path} does not record its prompt")
    scored = scored_prompt_from(prompt, scores, base.scores.step, origin_ids)
    return base.model_copy(update={"scores": scored, "likert": None})


# ========== Transfer matrix ==========

def _evaluate_cell(
    condition: Condition,
    trait: TraitDimension,
    backend: ChatBackend,
    items,
    seed: int,
    out_dir: Optional[Path],
    config: Optional[EvaluationConfig],
    scoring: Optional[ScoringConfig],
) -> EvaluationReport:
    self_transfer = condition.source_model is not None and condition.source_model == backend.model_id
    try:
        report = evaluate(condition, trait, backend, items, seed, out_dir, config, scoring)
    except ProfileTunerError as e:
        logger.warning(f"Cell [{backend.model_id}] {condition.display_name} / {trait.code} failed: {e}")
        report = EvaluationReport(
            model_id=backend.model_id, condition=condition.display_name, trait=trait,
            status=CellStatus.FAILED, error=f"{type(e).__name__}: {e}",
        )
    except Exception as e:
        logger.error(f"Cell [{backend.model_id}] {condition.display_name} / {trait.code} crashed", exc_info=True)
        report = EvaluationReport(
            model_id=backend.model_id, condition=condition.display_name, trait=trait,
            status=CellStatus.FAILED, error=f"{type(e).__name__}: {e}",
        )
    return report.model_copy(update={"self_transfer": self_transfer})


def transfer_matrix(
    conditions: list[Condition],
    traits: list[TraitDimension],
    backends: list[ChatBackend],
    items,
    seed: int,
    out_dir: Optional[Path] = None,
    config: Optional[EvaluationConfig] = None,
    scoring: Optional[ScoringConfig] = None,
) -> list[EvaluationReport]:
    """
    Evaluate every (model, condition, trait) cell. Failed cells are recorded
    in place and never stop the matrix. Reports come back in model, condition,
    trait order; with `out_dir`, report.json and report.txt are written.
    """
    if not backends or not conditions:
        raise DataError("the transfer matrix needs at least one model and one condition")
    conditions = label_conditions(conditions)
    config = config or EvaluationConfig()
    cells = list(product(backends, conditions, traits))
    logger.info(f"Transfer matrix: {len(backends)} models x {len(conditions)} conditions x {len(traits)} traits")

    with ThreadPoolExecutor(max_workers=config.max_cells_in_flight) as pool:
        futures = [
            pool.submit(
                contextvars.copy_context().run, _evaluate_cell,
                condition, trait, backend, items, seed, out_dir, config, scoring,
            )
            for backend, condition, trait in cells
        ]
        reports = [future.result() for future in futures]

    failed = sum(1 for r in reports if r.status == CellStatus.FAILED)
    logger.info(f"Transfer matrix done: {len(reports) - failed} ok, {failed} failed")

    if out_dir is not None:
        write_grid(
            out_dir, reports,
            models=[b.model_id for b in backends],
            conditions=[c.display_name for c in conditions],
            traits=traits,
        )
    return reports


def _cell_text(report: Optional[EvaluationReport]) -> str:
    if report is None:
        return ""
    if report.status == CellStatus.FAILED:
        return "FAILED"
    if report.self_transfer:
        return SELF_TRANSFER_MARK
    value = report.value
    return "n/a" if value is None else f"{value:.3f}"


def render_grid(
    reports: list[EvaluationReport],
    models: list[str],
    conditions: list[str],
    traits: list[TraitDimension],
) -> str:
    """Aligned text table: one block per model, rows = traits, columns = conditions."""
    index = {(r.model_id, r.condition, r.trait): r for r in reports}
    blocks = []
    for model in models:
        rows = [["Personality", *conditions]]
        for trait in traits:
            rows.append([trait.value, *(_cell_text(index.get((model, c, trait))) for c in conditions)])
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        lines = [f"Model: {model}"]
        for row in rows:
            lines.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def write_grid(
    out_dir: Path,
    reports: list[EvaluationReport],
    models: list[str],
    conditions: list[str],
    traits: list[TraitDimension],
) -> None:
    out_dir = Path(out_dir)
    write_json(out_dir / "report.json", {
        "models": models,
        "conditions": conditions,
        "traits": [t.value for t in traits],
        "cells": [json.loads(r.model_dump_json()) for r in reports],
    })
    (out_dir / "report.txt").write_text(render_grid(reports, models, conditions, traits), encoding="utf-8", newline="\n")


# ========== Profile* ==========

def profile_star(
    trait: TraitDimension,
    backend: ChatBackend,
    config: RunConfig,
    train_items: list[QuestionItem],
    run_dir: Path,
) -> tuple[OptimizationResult, Condition]:
    """
    Re-optimize a profile directly on one model, which acts as both optimizer
    and target, and register the result as a profile_star condition.
    """
    if config.trait != trait:
        config = config.model_copy(update={"trait": trait})
    store = RunStore(run_dir)
    result = PromptOptimizer(config, backend, backend).run(train_items, store)
    condition = Condition(name=ConditionName.PROFILE_STAR, prompt_path=Path(run_dir), source_model=backend.model_id)
    write_json(Path(run_dir) / "condition.json", condition)
    logger.info(f"Registered profile_star condition for {backend.model_id} / {trait.code}")
    return result, condition
