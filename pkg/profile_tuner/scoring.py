"""
Trait scoring against a target model.

Multiple-choice path: every item (and its paraphrase twin) is administered
under the persona prompt with a seeded option order; the binary f marks a
target-keyed choice, and the sets of target-keyed originals and twins give the
origin, consistency and paraphrase-sensitive scores.

Likert path: the statement bank is administered in several trials, each in a
fresh seeded order, and per-trait trial means are aggregated.
"""
import logging
import re
from collections import defaultdict
from typing import Optional

import numpy as np

from profile_tuner.backend import ChatBackend
from profile_tuner.errors import BatchCompletionError, DataError
from profile_tuner.prompts import LIKERT_ANCHORS
from profile_tuner.pydantic_models import (
    Administration, ChatRequest, Keyed, LikertAdministration, LikertItem, LikertReport,
    LikertTraitStats, LikertTrialResult, PersonaPrompt, QuestionItem, ScoredPrompt,
    ScoringConfig, TraitDimension, TraitScoreSet,
)
from profile_tuner.utils import derive_seed
from profile_tuner.validation import reverse_score

logger = logging.getLogger(__name__)

POSITIONS = "ABCD"

_LEADING_LABEL = re.compile(
    r"^(?i:answer|option|choice)?\s*(?:is)?\s*[:\-]?\s*[\(\[]?([A-D])(?:[\)\]\.:,;]|\s*$)"
)
_ANY_LABEL = re.compile(r"\b([A-D])\b")
_LEADING_RATING = re.compile(r"^\s*\(?([1-5])(?:\D|$)")
_ANY_RATING = re.compile(r"(?<![\d.])([1-5])(?!\d|\.\d)")
_NUMBERED_RATING = re.compile(r"^\s*(\d+)\s*[:.)\-]\s*\(?([1-5])\b", re.MULTILINE)


# ========== Multiple-choice administration ==========

def presentation_order(item: QuestionItem, seed: int) -> tuple[str, ...]:
    """Seeded permutation of the item's option labels; depends on (seed, item id) only."""
    rng = np.random.default_rng(derive_seed(seed, "present", item.id))
    permutation = rng.permutation(len(item.options))
    return tuple(item.options[i].label for i in permutation)


def render_item(item: QuestionItem, order: tuple[str, ...], instruction: str) -> str:
    lines = [instruction, "", f"Scenario: {item.scenario}", f"Question: {item.question}", ""]
    for position, label in zip(POSITIONS, order):
        lines.append(f"{position}. {item.option(label).text}")
    return "\n".join(lines)


def _parse_position(text: str, item: QuestionItem, order: tuple[str, ...]) -> Optional[str]:
    positions = POSITIONS[:len(order)]
    cleaned = re.sub(r"[*_`#]", "", text).strip()

    match = _LEADING_LABEL.match(cleaned)
    if match and match.group(1) in positions:
        return match.group(1)

    mentioned = {m for m in _ANY_LABEL.findall(cleaned) if m in positions}
    if len(mentioned) == 1:
        return mentioned.pop()

    lowered = cleaned.lower()
    hits = [
        position for position, label in zip(positions, order)
        if item.option(label).text.strip() and item.option(label).text.strip().lower() in lowered
    ]
    if len(hits) == 1:
        return hits[0]
    return None


def parse_choice(text: Optional[str], item: QuestionItem, order: tuple[str, ...]) -> Optional[str]:
    """
    Map a raw reply to the chosen option's label, or None.

    Ladder: leading position letter, then a unique letter anywhere, then a
    unique option-text match. Total: never raises.
    """
    try:
        position = _parse_position(text or "", item, order)
    except Exception:  # the ladder must stay total
        logger.debug(f"Choice parsing failed for {item.id}", exc_info=True)
        return None
    return order[POSITIONS.index(position)] if position else None


def target_keying(invert: bool) -> Keyed:
    return Keyed.LOW if invert else Keyed.HIGH


def build_administration(
    prompt: PersonaPrompt,
    item: QuestionItem,
    order: tuple[str, ...],
    raw_response: str,
    invert_keying: bool = False,
) -> Administration:
    choice = parse_choice(raw_response, item, order)
    keyed = None if choice is None else item.option(choice).keyed == target_keying(invert_keying)
    return Administration(
        item_id=item.id,
        source_id=item.source_id,
        prompt_id=prompt.id,
        presented_order=order,
        raw_response=raw_response,
        parsed_choice=choice,
        is_target_keyed=keyed,
    )


# ========== Pure score folds ==========

def score_set(administrations: list[Administration], origin_ids: list[str], trait: TraitDimension) -> TraitScoreSet:
    """Fold administrations into the origin/paraphrase target-keyed sets over D_p = origin_ids."""
    administered = frozenset(origin_ids)
    origin_correct, aug_correct, twinned = set(), set(), set()
    for adm in administrations:
        if adm.source_id not in administered:
            continue
        if adm.item_id == adm.source_id:
            if adm.is_target_keyed:
                origin_correct.add(adm.source_id)
        else:
            twinned.add(adm.source_id)
            if adm.is_target_keyed:
                aug_correct.add(adm.source_id)
    return TraitScoreSet(
        trait=trait,
        origin_correct=frozenset(origin_correct),
        aug_correct=frozenset(aug_correct),
        n_items=len(administered),
        administered_ids=administered,
        untwinned=tuple(i for i in origin_ids if i not in twinned),
    )


def scored_prompt_from(
    prompt: PersonaPrompt,
    score_set_: TraitScoreSet,
    step: int,
    question_sample: list[str],
) -> ScoredPrompt:
    s_origin, s_consist, s_ps = score_set_.scores()
    return ScoredPrompt(
        prompt=prompt,
        trait=score_set_.trait,
        s_ps=s_ps,
        s_consist=s_consist,
        s_origin=s_origin,
        step=step,
        question_sample=tuple(question_sample),
    )


# ========== Likert helpers ==========

def parse_rating(text: Optional[str]) -> Optional[int]:
    """Leading digit, then a unique standalone digit 1-5, then a unique scale anchor phrase."""
    text = (text or "").strip()
    match = _LEADING_RATING.match(text)
    if match:
        return int(match.group(1))
    digits = set(_ANY_RATING.findall(text))
    if len(digits) == 1:
        return int(digits.pop())
    lowered = text.lower()
    found = {
        value for phrase, value in LIKERT_ANCHORS.items()
        if phrase in lowered and not any(
            longer != phrase and phrase in longer and longer in lowered for longer in LIKERT_ANCHORS
        )
    }
    if len(found) == 1:
        return found.pop()
    return None


def parse_numbered_ratings(text: Optional[str]) -> dict[int, int]:
    """Parse '<position>: <rating>' lines; the first rating per position wins."""
    ratings: dict[int, int] = {}
    for position, rating in _NUMBERED_RATING.findall(text or ""):
        ratings.setdefault(int(position), int(rating))
    return ratings


def likert_order(n_items: int, seed: int, trial: int) -> list[int]:
    rng = np.random.default_rng(derive_seed(seed, "likert-order", trial))
    return [int(i) for i in rng.permutation(n_items)]


def likert_report_from(
    administrations: list[LikertAdministration],
    traits: list[TraitDimension],
    n_trials: int,
    skip_threshold: float = 0.2,
) -> LikertReport:
    """Aggregate per-trial trait means; trials skipping more than the threshold are excluded."""
    by_trial: dict[int, list[LikertAdministration]] = defaultdict(list)
    for adm in administrations:
        by_trial[adm.trial].append(adm)

    trials: list[LikertTrialResult] = []
    for trial in range(n_trials):
        rows = by_trial.get(trial, [])
        per_trait: dict[str, list[int]] = defaultdict(list)
        for adm in rows:
            if adm.scored is not None:
                per_trait[adm.trait.value].append(adm.scored)
        skipped = sum(1 for adm in rows if adm.scored is None)
        trials.append(LikertTrialResult(
            trial=trial,
            trait_means={
                t.value: float(np.mean(per_trait[t.value])) if per_trait[t.value] else None
                for t in traits
            },
            skipped=skipped,
            n_items=len(rows),
            valid=bool(rows) and skipped / len(rows) <= skip_threshold,
        ))

    valid_trials = [t for t in trials if t.valid]
    stats: dict[str, LikertTraitStats] = {}
    for trait in traits:
        means = [t.trait_means[trait.value] for t in valid_trials if t.trait_means[trait.value] is not None]
        stats[trait.value] = LikertTraitStats(
            trait=trait,
            mean=float(np.mean(means)) if means else None,
            std=float(np.std(means)) if means else None,
            trial_means=means,
        )

    trait_means = [s.mean for s in stats.values() if s.mean is not None]
    trait_stds = [s.std for s in stats.values() if s.std is not None]
    return LikertReport(
        trials=trials,
        per_trait=stats,
        grand_mean=float(np.mean(trait_means)) if trait_means else None,
        average_std=float(np.mean(trait_stds)) if trait_stds else None,
        invalid_trials=[t.trial for t in trials if not t.valid],
    )


# ========== Scorer ==========

class TraitScorer:
    """Administers items to one target backend under persona prompts."""

    def __init__(self, backend: ChatBackend, config: Optional[ScoringConfig] = None):
        self.backend = backend
        self.config = config or ScoringConfig()

    def _item_request(self, prompt: PersonaPrompt, item: QuestionItem, order: tuple[str, ...]) -> ChatRequest:
        return self.backend.request(
            system=prompt.text or None,
            user=render_item(item, order, self.config.task_instruction),
            temperature=0.0,
            max_tokens=self.config.target_max_tokens,
        )

    def _run_batch(self, requests: list[ChatRequest]) -> list:
        try:
            return self.backend.complete_batch(requests, max_in_flight=self.config.max_in_flight)
        except BatchCompletionError as e:
            raise e.failures[min(e.failures)] from e

    def administer(self, prompt: PersonaPrompt, item: QuestionItem, rng_seed: int) -> Administration:
        """Administer one item; unparseable replies yield an Administration without a choice."""
        order = presentation_order(item, rng_seed)
        response = self.backend.complete(self._item_request(prompt, item, order))
        return build_administration(prompt, item, order, response.text, self.config.invert_keying)

    def administer_many(self, prompt: PersonaPrompt, items: list[QuestionItem], seed: int) -> list[Administration]:
        orders = [presentation_order(item, seed) for item in items]
        requests = [self._item_request(prompt, item, order) for item, order in zip(items, orders)]
        responses = self._run_batch(requests)
        return [
            build_administration(prompt, item, order, response.text, self.config.invert_keying)
            for item, order, response in zip(items, orders, responses)
        ]

    def score_with_log(
        self,
        prompt: PersonaPrompt,
        items: list[QuestionItem],
        seed: int,
        step: int = 0,
    ) -> tuple[ScoredPrompt, list[Administration]]:
        """
        Administer originals and their twins and compute s_origin, s_consist, s_ps.

        `items` holds originals and twins together; twins whose source is
        absent are ignored, originals without a twin only count toward |D_p|.
        """
        origins = [i for i in items if not i.is_twin]
        if not origins:
            raise DataError("no original items to score")
        traits = {i.trait for i in origins}
        if len(traits) != 1:
            raise DataError(f"items span several traits: {sorted(t.code for t in traits)}")
        trait = traits.pop()

        origin_ids = [i.id for i in origins]
        wanted = set(origin_ids)
        twins = [i for i in items if i.is_twin and i.paraphrase_of in wanted]
        administrations = self.administer_many(prompt, origins + twins, seed)

        scores = score_set(administrations, origin_ids, trait)
        if scores.untwinned:
            logger.warning(f"{len(scores.untwinned)} items without twins count as inconsistent: {list(scores.untwinned)[:5]}")
        scored = scored_prompt_from(prompt, scores, step, origin_ids)
        logger.debug(
            f"Scored prompt {prompt.id} on {len(origins)} {trait.code} items: "
            f"origin={scored.s_origin:.3f} consist={scored.s_consist:.3f} ps={scored.s_ps:.3f}"
        )
        return scored, administrations

    def trait_scores(self, prompt: PersonaPrompt, items: list[QuestionItem], seed: int, step: int = 0) -> ScoredPrompt:
        return self.score_with_log(prompt, items, seed, step)[0]

    # ----- Likert -----

    def _likert_requests(self, prompt: PersonaPrompt, items: list[LikertItem], order: list[int]) -> list[tuple[list[int], ChatRequest]]:
        per_request = self.config.likert_items_per_request
        total = len(order)
        chunks = []
        for start in range(0, total, per_request):
            positions = list(range(start, min(start + per_request, total)))
            if per_request == 1:
                position = positions[0]
                user = (
                    f"{self.config.likert_instruction}\n\n"
                    f"Statement {position + 1}/{total}: {items[order[position]].statement}\n\n"
                    "Answer with a single number from 1 to 5."
                )
            else:
                statements = "\n".join(f"{p + 1}. {items[order[p]].statement}" for p in positions)
                user = (
                    f"{self.config.likert_instruction}\n\n{statements}\n\n"
                    "Answer with one line per statement in the form '<number>: <rating>'."
                )
            request = self.backend.request(
                system=prompt.text or None,
                user=user,
                temperature=0.0,
                max_tokens=self.config.target_max_tokens * len(positions),
            )
            chunks.append((positions, request))
        return chunks

    def likert_with_log(
        self,
        prompt: PersonaPrompt,
        items: list[LikertItem],
        seed: int,
        trials: Optional[int] = None,
    ) -> tuple[LikertReport, list[LikertAdministration]]:
        """
        Administer the Likert bank in `trials` independently shuffled orders.

        Unparseable ratings are skipped for that trial; a trial with more than
        likert_skip_threshold skipped items is flagged invalid and excluded.
        """
        if trials is None:
            trials = self.config.likert_trials
        if trials < 1:
            raise DataError("trials must be >= 1")
        if not items:
            raise DataError("no Likert items to administer")

        plan = []
        for trial in range(trials):
            order = likert_order(len(items), seed, trial)
            for positions, request in self._likert_requests(prompt, items, order):
                plan.append((trial, order, positions, request))
        responses = self._run_batch([request for *_, request in plan])

        administrations: list[LikertAdministration] = []
        for (trial, order, positions, _), response in zip(plan, responses):
            if len(positions) == 1:
                ratings = {positions[0] + 1: parse_rating(response.text)}
            else:
                ratings = parse_numbered_ratings(response.text)
            for position in positions:
                item = items[order[position]]
                raw = ratings.get(position + 1)
                administrations.append(LikertAdministration(
                    trial=trial,
                    position=position,
                    item_id=item.id,
                    trait=item.trait,
                    raw_response=response.text,
                    raw_rating=raw,
                    scored=reverse_score(raw, item.keying) if raw is not None else None,
                ))

        traits = sorted({i.trait for i in items}, key=list(TraitDimension).index)
        report = likert_report_from(administrations, traits, trials, self.config.likert_skip_threshold)
        if report.invalid_trials:
            logger.warning(f"Likert trials flagged invalid (> {self.config.likert_skip_threshold:.0%} skipped): {report.invalid_trials}")
        logger.info(f"Likert assessment over {trials} trials: grand mean {report.grand_mean}, average std {report.average_std}")
        return report, administrations

    def likert_assess(self, prompt: PersonaPrompt, items: list[LikertItem], seed: int, trials: Optional[int] = None) -> LikertReport:
        return self.likert_with_log(prompt, items, seed, trials)[0]
