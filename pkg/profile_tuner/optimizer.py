"""
Persona-profile optimization by prompting.

Every step the optimizer model reads the best profiles so far (ascending by
score) together with a few open-ended situations, proposes k new profiles,
and each proposal is scored on a fresh sample of training items.
"""
import contextvars
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel

from profile_tuner.backend import ChatBackend
from profile_tuner.dataset import originals_of, twins_by_source, with_twins
from profile_tuner.errors import CapacityError, ConfigurationError, DataError, StateError
from profile_tuner.logging_context import clear_run_id, set_run_id
from profile_tuner.prompts import (
    DEFAULT_FORMAT_DIRECTIVE, DEFAULT_META_TASK, DEFAULT_META_TEMPLATE, PROFILE_CLOSE, PROFILE_OPEN,
)
from profile_tuner.pydantic_models import (
    MetaPrompt, OptimizationResult, PersonaPrompt, QuestionItem, RunConfig, ScoredPrompt,
    StepRecord, TrajectoryBuffer, TrajectoryEntry,
)
from profile_tuner.run_store import RunStore
from profile_tuner.scoring import TraitScorer
from profile_tuner.utils import derive_seed, estimate_tokens, extract_sentinel_blocks

logger = logging.getLogger(__name__)

EMPTY_PROFILE = "(empty profile)"


class StepOutcome(BaseModel):
    step: int
    entries: list[ScoredPrompt]
    question_sample: list[str]
    dropped: int = 0


def load_meta_template(path: Optional[Path]) -> str:
    if path is None:
        return DEFAULT_META_TEMPLATE
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"meta-prompt template not found: {path}")
    template = path.read_text(encoding="utf-8")
    missing = [slot for slot in ("{task_instruct}", "{trajectory}", "{problem_examples}", "{format_directive}") if slot not in template]
    if missing:
        raise ConfigurationError(f"meta-prompt template {path.name} lacks slots: {missing}")
    return template


class PromptOptimizer:
    """
    Runs the optimize-by-prompting loop for one trait.

    The optimizer backend proposes profiles at `optimizer_temperature`; the
    target backend answers items greedily under each proposed profile.
    """

    def __init__(
        self,
        config: RunConfig,
        optimizer_backend: ChatBackend,
        target_backend: ChatBackend,
    ):
        self.config = config
        self.optimizer_backend = optimizer_backend
        self.target_backend = target_backend
        self.scorer = TraitScorer(target_backend, config.scoring)
        self.template = load_meta_template(config.meta_prompt_template_path)
        self.scoring_seed = derive_seed(config.seed, "administer")

    # ========== Sampling and meta-prompt ==========

    def sample_questions(self, train_items: list[QuestionItem], step: int) -> list[QuestionItem]:
        """Fresh seeded sample of q original train items for one step, shared by all candidates."""
        origins = sorted(originals_of(train_items, self.config.trait), key=lambda i: i.id)
        q = self.config.questions_per_step
        if len(origins) < q:
            raise CapacityError(f"{len(origins)} train items available, {q} needed per step")
        rng = np.random.default_rng(derive_seed(self.config.seed, "sample", step))
        picked = rng.choice(len(origins), size=q, replace=False)
        return [origins[i] for i in sorted(int(i) for i in picked)]

    def task_instruct(self) -> str:
        trait = self.config.trait
        return DEFAULT_META_TASK.format(trait=trait.noun, trait_code=trait.code)

    def build_meta_prompt(
        self,
        buffer: TrajectoryBuffer,
        sampled_items: list[QuestionItem],
        rng: np.random.Generator,
    ) -> MetaPrompt:
        """
        Assemble the meta-prompt: top-n trajectory ascending by s_ps, one
        open-ended example per sampled item (scenario plus one uniformly drawn
        option), and the sentinel format directive. Lowest-scoring trajectory
        entries are dropped while the rendering exceeds the token budget.
        """
        if not buffer.entries:
            raise StateError("cannot build a meta-prompt from an empty buffer")

        top = buffer.top_n(self.config.trajectory_top_n)
        block = [
            TrajectoryEntry(text=e.prompt.text or EMPTY_PROFILE, score=e.s_ps)
            for e in reversed(top)
        ]
        examples = []
        for item in sampled_items:
            option = item.options[int(rng.integers(len(item.options)))]
            examples.append(f"{item.scenario} {option.text}")

        meta = MetaPrompt(
            task_instruct=self.task_instruct(),
            trajectory_block=block,
            problem_examples=examples,
            format_directive=DEFAULT_FORMAT_DIRECTIVE,
        )
        while meta.trajectory_block and estimate_tokens(self.render(meta)) > self.config.meta_prompt_token_budget:
            meta = meta.model_copy(update={"trajectory_block": meta.trajectory_block[1:]})
            logger.debug(f"Meta-prompt over budget, trajectory trimmed to {len(meta.trajectory_block)} entries")
        if estimate_tokens(self.render(meta)) > self.config.meta_prompt_token_budget:
            logger.warning(f"Meta-prompt exceeds the {self.config.meta_prompt_token_budget}-token budget without any trajectory")
        return meta

    def render(self, meta: MetaPrompt) -> str:
        trajectory = "\n\n".join(
            f"Profile:\n{entry.text}\nScore: {entry.score:.3f}" for entry in meta.trajectory_block
        )
        examples = "\n".join(f"- {example}" for example in meta.problem_examples)
        try:
            return self.template.format(
                task_instruct=meta.task_instruct,
                trajectory=trajectory,
                problem_examples=examples,
                format_directive=meta.format_directive,
            )
        except (KeyError, IndexError) as e:
            raise ConfigurationError(f"meta-prompt template has an unknown slot: {e}") from e

    # ========== Scoring ==========

    def _score_all(self, prompts: list[PersonaPrompt], items: list[QuestionItem], step: int) -> list[ScoredPrompt]:
        """Score several prompts on the same items concurrently; results in input order."""
        if not prompts:
            return []
        workers = min(len(prompts), self.config.max_in_flight)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(contextvars.copy_context().run, self.scorer.trait_scores, prompt, items, self.scoring_seed, step)
                for prompt in prompts
            ]
            return [future.result() for future in futures]

    def seed_buffer(self, train_items: list[QuestionItem]) -> StepOutcome:
        """Score the Origin persona (plus configured seed prompts) as step 0."""
        sample = self.sample_questions(train_items, 0)
        prompts = [PersonaPrompt.origin_baseline()] + [PersonaPrompt.seed(text) for text in self.config.seed_prompts]
        entries = self._score_all(prompts, with_twins(sample, train_items), 0)
        logger.info(f"Seeded buffer with {len(entries)} prompts; best s_ps {max(e.s_ps for e in entries):.3f}")
        return StepOutcome(step=0, entries=entries, question_sample=[i.id for i in sample])

    def step(self, buffer: TrajectoryBuffer, train_items: list[QuestionItem], step: Optional[int] = None) -> StepOutcome:
        """
        One optimization step: sample q items, build the meta-prompt, request k
        candidates, extract them between the sentinels and score the parseable
        ones. Entries are appended to `buffer` in candidate order.
        """
        step = buffer.step_counter if step is None else step
        config = self.config
        sample = self.sample_questions(train_items, step)
        meta = self.build_meta_prompt(buffer, sample, np.random.default_rng(derive_seed(config.seed, "examples", step)))
        rendered = self.render(meta)
        logger.debug(f"Step {step} meta-prompt ({estimate_tokens(rendered)} tokens):\n{rendered[:500]}")

        requests = [
            self.optimizer_backend.request(
                user=rendered,
                temperature=config.optimizer_temperature,
                max_tokens=config.optimizer_max_tokens,
                seed_hint=derive_seed(config.seed, "candidate", step, j),
            )
            for j in range(config.candidates_per_step)
        ]
        responses = self.optimizer_backend.complete_batch(
            requests, max_in_flight=config.max_in_flight, force_cache=config.cache_stochastic
        )

        candidates: list[PersonaPrompt] = []
        for j, response in enumerate(responses):
            blocks = extract_sentinel_blocks(response.text, PROFILE_OPEN, PROFILE_CLOSE)
            if not blocks:
                logger.debug(f"Step {step} candidate {j} has no profile block: {response.text[:120]!r}")
                continue
            candidates.append(PersonaPrompt.generated(blocks[0], step))
        dropped = len(responses) - len(candidates)
        if not candidates:
            logger.warning(f"Step {step}: all {len(responses)} candidates were unparseable")
        elif dropped:
            logger.info(f"Step {step}: dropped {dropped} malformed candidates")

        entries = self._score_all(candidates, with_twins(sample, train_items), step)
        buffer.append_step(entries)
        return StepOutcome(step=step, entries=entries, question_sample=[i.id for i in sample], dropped=dropped)

    def rescore(self, buffer: TrajectoryBuffer, train_items: list[QuestionItem]) -> list[ScoredPrompt]:
        """Re-score the top-m buffer entries on the full train set (entries keep their step)."""
        top = buffer.top_n(self.config.rescore_top_m)
        origins = originals_of(train_items, self.config.trait)
        items = with_twins(origins, train_items)
        rescored = []
        for entry in top:
            scored = self.scorer.trait_scores(entry.prompt, items, self.scoring_seed, entry.step)
            logger.info(f"Rescored {entry.prompt.id} (step {entry.step}): {entry.s_ps:.3f} -> {scored.s_ps:.3f}")
            rescored.append(scored)
        return rescored

    # ========== Run ==========

    def run(self, train_items: list[QuestionItem], store: Optional[RunStore] = None) -> OptimizationResult:
        """
        Main function: seed, run steps 1..max_steps, and return Q*.

        With a store, every step is persisted as it completes and a run found
        in the store is continued from its last committed step.
        """
        if not originals_of(train_items, self.config.trait):
            raise DataError(f"no {self.config.trait.code} items in the training set")
        if not twins_by_source(train_items):
            raise DataError("training items carry no paraphrase twins; s_ps is undefined")

        if store is None:
            return self._run(train_items, None)
        set_run_id(store.run_dir.name)
        try:
            return self._run(train_items, store)
        finally:
            clear_run_id()

    def _run(self, train_items: list[QuestionItem], store: Optional[RunStore]) -> OptimizationResult:
        config = self.config
        if store is not None:
            store.initialize(config)
            buffer, records = store.load_progress()
        else:
            buffer, records = TrajectoryBuffer(), []

        if not records:
            outcome = self.seed_buffer(train_items)
            buffer.append_step(outcome.entries)
            records.append(self._commit(store, outcome))
        elif records[-1].step:
            logger.info(f"Resuming {config.trait.code} run after step {records[-1].step}")

        for step in range(records[-1].step + 1, config.max_steps + 1):
            logger.info(f"===== {config.trait.code} step {step}/{config.max_steps} =====")
            outcome = self.step(buffer, train_items, step)
            records.append(self._commit(store, outcome))
            best = buffer.best()
            step_scores = [e.s_ps for e in outcome.entries]
            logger.info(
                f"Step {step}: {len(outcome.entries)} candidates, "
                f"mean s_ps {np.mean(step_scores) if step_scores else float('nan'):.3f}, "
                f"best so far {best.s_ps:.3f} (step {best.step})"
            )

        rescored = self.rescore(buffer, train_items) if config.rescore_top_m else []
        if rescored:
            best = TrajectoryBuffer(entries=rescored).best()
        else:
            best = buffer.best()

        result = OptimizationResult(
            best=best,
            entries=buffer.entries,
            steps_completed=records[-1].step,
            dropped_per_step={r.step: r.dropped for r in records if r.dropped},
            rescored=rescored,
            config_hash=config.config_hash(),
            run_dir=store.run_dir if store else None,
        )
        if store is not None:
            store.write_result(result)
        logger.info(f"Q* for {config.trait.code}: s_ps {best.s_ps:.3f} from step {best.step} ({best.prompt.id})")
        return result

    @staticmethod
    def _commit(store: Optional[RunStore], outcome: StepOutcome) -> StepRecord:
        record = StepRecord(
            step=outcome.step,
            question_sample=tuple(outcome.question_sample),
            candidates=len(outcome.entries),
            dropped=outcome.dropped,
        )
        if store is not None:
            store.append_step(outcome.entries, record)
        return record
