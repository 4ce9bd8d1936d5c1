import logging
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from profile_tuner.artifact_logger import log_llm_artifact
from profile_tuner.backend import ChatBackend
from profile_tuner.errors import CapacityError, DataError, FormatError
from profile_tuner.pydantic_models import (
    AugmentationConfig, AugmentationResult, ChatResponse, LikertItem,
    QuestionItem, SplitManifest, SplitSpec, TraitDimension, is_dark_triad,
)
from profile_tuner.utils import derive_seed, extract_json_from_response, read_jsonl, write_jsonl
from profile_tuner.validation import validate_item_bank

logger = logging.getLogger(__name__)

OPTION_LABELS = "ABCD"
TWIN_SUFFIX = "__aug"

Bank = list[QuestionItem] | list[LikertItem]


def _parse_record(record: dict) -> QuestionItem | LikertItem:
    if "statement" in record:
        return LikertItem.model_validate(record)
    options = [
        {**option, "label": option.get("label") or OPTION_LABELS[i]} if i < len(OPTION_LABELS)
        else option
        for i, option in enumerate(record.get("options", []))
    ]
    return QuestionItem.model_validate({**record, "options": options})


def load_bank(path: str | Path) -> Bank:
    """
    Load a JSON-lines item bank (situational items or Likert statements).

    Option labels missing from the file are assigned A-D in file order.
    Dark-Triad items are dropped with a logged count.

    Raises:
        FormatError: unreadable file, empty bank, or a record that does not parse
        DataError: the bank violates item invariants (all violations listed)
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"item bank not found: {path}")

    items: list[QuestionItem | LikertItem] = []
    dark_triad = 0
    try:
        for line_number, record in read_jsonl(path):
            if not isinstance(record, dict):
                raise FormatError("record is not a JSON object", line_number)
            if is_dark_triad(record.get("trait", "")):
                dark_triad += 1
                continue
            try:
                items.append(_parse_record(record))
            except (ValidationError, ValueError, IndexError) as e:
                raise FormatError(f"invalid record: {e}", line_number) from e
    except UnicodeDecodeError as e:
        raise FormatError(f"not UTF-8 text: {e}") from e

    if dark_triad:
        logger.info(f"Filtered {dark_triad} Dark Triad items from {path.name}")
    if not items:
        raise FormatError(f"item bank {path.name} contains no Big-Five items")
    if len({type(i) for i in items}) > 1:
        raise FormatError(f"item bank {path.name} mixes situational and Likert items")

    report = validate_item_bank(items)
    if not report.valid:
        raise DataError(f"item bank {path.name} has {len(report.violations)} violations", report.violations)

    logger.info(f"Loaded {len(items)} items from {path.name}: {report.per_trait_counts}")
    return items


def write_bank(path: str | Path, items: Bank) -> None:
    write_jsonl(path, items)


def originals_of(items: list[QuestionItem], trait: Optional[TraitDimension] = None) -> list[QuestionItem]:
    return [i for i in items if not i.is_twin and (trait is None or i.trait == trait)]


def twins_by_source(items: list[QuestionItem]) -> dict[str, QuestionItem]:
    return {i.paraphrase_of: i for i in items if i.is_twin}


def with_twins(origins: list[QuestionItem], bank: list[QuestionItem]) -> list[QuestionItem]:
    """Origins followed by the twins of those origins that exist in the bank."""
    twins = twins_by_source(bank)
    return list(origins) + [twins[o.id] for o in origins if o.id in twins]


def split(items: list[QuestionItem], spec: SplitSpec) -> tuple[list[QuestionItem], list[QuestionItem]]:
    """
    Deterministic per-trait train/test split of original items; twins follow
    their source into the same partition.

    The permutation is seeded by (spec.seed, trait code) over ids sorted
    lexicographically, so it is identical on every machine and independent of
    file order.

    Raises:
        CapacityError: fewer originals than train_size + test_size
    """
    origins = sorted(originals_of(items, spec.trait), key=lambda i: i.id)
    needed = spec.train_size + spec.test_size
    if len(origins) < needed:
        raise CapacityError(
            f"{spec.trait.code}: {len(origins)} items available, {needed} required "
            f"({spec.train_size} train + {spec.test_size} test)"
        )

    rng = np.random.default_rng(derive_seed(spec.seed, "split", spec.trait.code))
    order = rng.permutation(len(origins))
    train = [origins[i] for i in order[:spec.train_size]]
    test = [origins[i] for i in order[spec.train_size:needed]]
    logger.info(f"Split {spec.trait.code}: {len(train)} train / {len(test)} test (seed {spec.seed})")
    return with_twins(train, items), with_twins(test, items)


def split_manifest(train: list[QuestionItem], test: list[QuestionItem], spec: SplitSpec) -> SplitManifest:
    return SplitManifest(
        trait=spec.trait,
        seed=spec.seed,
        train_ids=[i.id for i in train],
        test_ids=[i.id for i in test],
    )


def apply_manifest(items: list[QuestionItem], manifest: SplitManifest) -> tuple[list[QuestionItem], list[QuestionItem]]:
    """Rebuild a persisted split from its id lists."""
    by_id = {i.id: i for i in items}
    missing = [i for i in manifest.train_ids + manifest.test_ids if i not in by_id]
    if missing:
        raise DataError(f"split manifest references {len(missing)} unknown items", missing[:20])
    return [by_id[i] for i in manifest.train_ids], [by_id[i] for i in manifest.test_ids]


class AugmentationProcessor:
    """Creates one paraphrase twin per original item with an augmenter model."""

    def __init__(self, backend: ChatBackend, config: Optional[AugmentationConfig] = None):
        self.backend = backend
        self.config = config or AugmentationConfig()

    def process(self, items: list[QuestionItem]) -> AugmentationResult:
        """
        Main function: paraphrase the scenario and question of every twin-less
        original; options are copied verbatim.

        Returns:
            AugmentationResult with the input items plus new twins, and a
            failures map (item id -> reason) for items left twin-less
        """
        already = set(twins_by_source(items))
        pending = [i for i in items if not i.is_twin and i.id not in already]
        logger.info(f"Augmenting {len(pending)} items ({len(already)} already twinned)")

        requests = [
            self.backend.request(
                user=self.config.template.format(scenario=item.scenario, question=item.question),
                temperature=self.config.temperature,
                max_tokens=self.config.max_tokens,
            )
            for item in pending
        ]
        responses = self.backend.complete_batch(
            requests, max_in_flight=self.config.max_in_flight, return_exceptions=True
        )

        twins: list[QuestionItem] = []
        failures: dict[str, str] = {}
        for item, response in zip(pending, responses):
            if isinstance(response, Exception):
                failures[item.id] = f"augmenter error: {response}"
                continue
            try:
                twins.append(self._make_twin(item, response))
            except ValueError as e:
                failures[item.id] = str(e)

        for item_id, reason in failures.items():
            logger.warning(f"Item {item_id} left without twin: {reason}")

        result = AugmentationResult(items=list(items) + twins, failures=failures)
        log_llm_artifact(result.model_copy(update={"items": []}), "augmentation_failures")
        logger.info(f"Augmentation complete: {len(twins)} twins, {len(failures)} failures")
        return result

    def _make_twin(self, item: QuestionItem, response: ChatResponse) -> QuestionItem:
        """Parse the augmenter reply; plain text is taken as the rewritten scenario."""
        scenario, question = response.text.strip(), item.question
        try:
            data = extract_json_from_response(response.text)
            if isinstance(data, dict) and data.get("scenario"):
                scenario = str(data["scenario"]).strip()
                question = str(data.get("question") or item.question).strip()
        except ValueError:
            logger.debug(f"Augmenter reply for {item.id} is not JSON, using it as the scenario")

        if len(scenario) < self.config.min_length:
            raise ValueError(f"degenerate paraphrase (< {self.config.min_length} characters)")
        if scenario == item.scenario and question == item.question:
            raise ValueError("paraphrase identical to source")

        return QuestionItem(
            id=f"{item.id}{TWIN_SUFFIX}",
            trait=item.trait,
            scenario=scenario,
            question=question,
            options=item.options,
            paraphrase_of=item.id,
        )
