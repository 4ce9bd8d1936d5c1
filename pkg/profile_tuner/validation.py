"""Item-bank invariant checks and Likert keying."""
import logging
from collections import Counter

from profile_tuner.errors import DomainError
from profile_tuner.pydantic_models import (
    QuestionItem, LikertItem, LikertKeying, Keyed, TraitDimension, ValidationReport,
)

logger = logging.getLogger(__name__)

OPTIONS_PER_ITEM = 4
HIGH_OPTIONS_PER_ITEM = 2


def validate_item_bank(items: list[QuestionItem | LikertItem]) -> ValidationReport:
    """
    Check every item-bank invariant and report all violations at once.
    
    Violations are data, not failures: the report is valid iff it lists none.
    Paraphrase coverage is the fraction of original items that have a twin.
    """
    violations: list[str] = []
    counts = Counter(item.trait.value for item in items)
    by_id: dict[str, QuestionItem | LikertItem] = {}

    for item in items:
        if item.id in by_id:
            violations.append(f"{item.id}: duplicate item id")
        by_id[item.id] = item

    twinned: set[str] = set()
    for item in items:
        if isinstance(item, LikertItem):
            if not item.statement.strip():
                violations.append(f"{item.id}: empty statement")
            continue

        n_options = len(item.options)
        if n_options != OPTIONS_PER_ITEM:
            violations.append(f"{item.id}: option count {n_options} ≠ {OPTIONS_PER_ITEM}")
        n_high = sum(1 for o in item.options if o.keyed == Keyed.HIGH)
        n_low = n_options - n_high
        if n_options == OPTIONS_PER_ITEM and n_high != HIGH_OPTIONS_PER_ITEM:
            violations.append(f"{item.id}: keying {n_high} high / {n_low} low ≠ 2 / 2")
        labels = [o.label for o in item.options]
        if len(set(labels)) != len(labels):
            violations.append(f"{item.id}: duplicate option labels")

        if item.paraphrase_of is None:
            continue
        source = by_id.get(item.paraphrase_of)
        if source is None:
            violations.append(f"{item.id}: paraphrase of unknown item {item.paraphrase_of}")
        elif source.trait != item.trait:
            violations.append(f"{item.id}: cross-trait paraphrase ({item.trait.code} twin of {source.trait.code} item)")
        elif isinstance(source, QuestionItem) and source.is_twin:
            violations.append(f"{item.id}: paraphrase of a paraphrase ({source.id})")
        elif item.paraphrase_of in twinned:
            violations.append(f"{item.id}: second twin for {item.paraphrase_of}")
        else:
            twinned.add(item.paraphrase_of)
            if isinstance(source, QuestionItem) and source.options != item.options:
                violations.append(f"{item.id}: twin options differ from source")

    originals = [i for i in items if isinstance(i, QuestionItem) and not i.is_twin]
    coverage = len(twinned) / len(originals) if originals else 0.0

    report = ValidationReport(
        n_items=len(items),
        per_trait_counts={t.value: counts.get(t.value, 0) for t in TraitDimension},
        paraphrase_coverage=coverage,
        violations=violations,
    )
    if violations:
        logger.warning(f"Item bank has {len(violations)} violations")
    return report


def reverse_score(raw: int, keying: LikertKeying) -> int:
    """Apply Likert keying: positive items keep their rating, negative ones become 6 - raw."""
    if isinstance(raw, bool) or not isinstance(raw, int) or not 1 <= raw <= 5:
        raise DomainError(f"Likert rating out of range (1..5): {raw!r}")
    return 6 - raw if keying == LikertKeying.NEGATIVE else raw
