"""Test domain models in profile_tuner/pydantic_models.py"""
import pytest
from pydantic import ValidationError

from profile_tuner.pydantic_models import (
    Administration, CellStatus, ChatRequest, Checkpoint, Condition, ConditionName, Curve, EvaluationReport,
    LikertAdministration, LikertTraitStats, SplitManifest,
    MetaPrompt, PersonaPrompt, ScoredPrompt, TraitDimension, TraitScoreSet, TrajectoryBuffer,
    TrajectoryEntry, is_dark_triad,
)
from profile_tuner.utils import content_hash


def scored(text: str, s_ps: float, step: int, s_origin: float = 1.0) -> ScoredPrompt:
    prompt = PersonaPrompt.generated(text, step) if step else PersonaPrompt.seed(text)
    return ScoredPrompt(
        prompt=prompt, trait=TraitDimension.OPENNESS, s_ps=s_ps,
        s_consist=s_ps / s_origin if s_origin else 0.0, s_origin=s_origin, step=step,
    )


class TestTraitDimension:
    """Trait vocabulary"""

    def test_codes(self):
        assert [t.code for t in TraitDimension] == ["OPE", "CON", "EXT", "AGR", "NEU"]

    def test_parse_is_case_insensitive(self):
        assert TraitDimension.parse("agr") is TraitDimension.AGREEABLENESS
        assert TraitDimension.parse("  Extraversion ") is TraitDimension.EXTRAVERSION

    def test_parse_rejects_unknown(self):
        with pytest.raises(ValueError, match="Unknown Big-Five trait"):
            TraitDimension.parse("Grit")

    def test_models_accept_short_codes(self):
        prompt = PersonaPrompt.seed("You are curious.")
        built = [
            ScoredPrompt(prompt=prompt, trait="OPE", s_ps=0.5, s_consist=0.5, s_origin=1.0, step=0),
            TraitScoreSet(trait="neu", origin_correct=frozenset(), aug_correct=frozenset(),
                          n_items=0, administered_ids=frozenset()),
            EvaluationReport(model_id="m", condition="origin", trait="AGR", status=CellStatus.FAILED, error="x"),
            Checkpoint(step=1, trait="CON", prompt=prompt, s_ps=0.5, question_sample=(), seed=0),
            Curve(trait="EXT", window=1, points=[], smoothed=[]),
            SplitManifest(trait="NEU", seed=0, train_ids=[], test_ids=[]),
            LikertTraitStats(trait="OPE"),
            LikertAdministration(trial=0, position=0, item_id="i", trait="Agr", raw_response="3"),
        ]
        assert [m.trait.code for m in built] == ["OPE", "NEU", "AGR", "CON", "EXT", "NEU", "OPE", "AGR"]

    def test_models_reject_unknown_trait(self):
        with pytest.raises(ValidationError, match="Unknown Big-Five trait"):
            SplitManifest(trait="GRIT", seed=0, train_ids=[], test_ids=[])

    def test_dark_triad_labels(self):
        assert is_dark_triad("Narcissism")
        assert is_dark_triad("psy")
        assert not is_dark_triad("Openness")


class TestPersonaPrompt:
    """Content-addressed persona prompts"""

    def test_id_is_content_hash(self):
        prompt = PersonaPrompt.seed("A curious painter.")
        assert prompt.id == content_hash("A curious painter.")

    def test_same_text_same_id_across_origins(self):
        assert PersonaPrompt.seed("x y").id == PersonaPrompt.generated("x y", 4).id

    def test_mismatched_id_rejected(self):
        with pytest.raises(ValidationError, match="does not match"):
            PersonaPrompt.model_validate({"text": "abc", "origin": {"kind": "seed"}, "id": "deadbeef"})

    def test_empty_text_only_for_origin(self):
        assert PersonaPrompt.origin_baseline().text == ""
        assert PersonaPrompt.origin_baseline().is_origin
        with pytest.raises(ValidationError):
            PersonaPrompt.generated("   ", 1)

    def test_round_trip_keeps_id(self):
        prompt = PersonaPrompt.generated("Loves maps", 3)
        assert PersonaPrompt.model_validate_json(prompt.model_dump_json()) == prompt


class TestScoredPrompt:
    """Score ordering invariant"""

    def test_s_ps_cannot_exceed_s_origin(self):
        with pytest.raises(ValidationError, match="exceeds"):
            ScoredPrompt(
                prompt=PersonaPrompt.seed("p"), trait="OPE",
                s_ps=0.6, s_consist=1.0, s_origin=0.5, step=0,
            )

    def test_scores_bounded(self):
        with pytest.raises(ValidationError):
            scored("p", 1.5, 1)


class TestAdministration:
    """Administration record invariants"""

    def test_choice_must_be_presented(self):
        with pytest.raises(ValidationError, match="not presented"):
            Administration(
                item_id="i", source_id="i", prompt_id="p", presented_order=("A", "B", "C", "D"),
                raw_response="E", parsed_choice="E", is_target_keyed=True,
            )

    def test_keyed_flag_requires_choice(self):
        with pytest.raises(ValidationError):
            Administration(
                item_id="i", source_id="i", prompt_id="p", presented_order=("A", "B"),
                raw_response="?", parsed_choice=None, is_target_keyed=False,
            )

    def test_unparsed_scores_zero(self):
        adm = Administration(item_id="i", source_id="i", prompt_id="p", presented_order=("A",), raw_response="??")
        assert adm.f == 0


class TestTraitScoreSet:
    """Set-based score computation"""

    def test_scores(self):
        scores = TraitScoreSet(
            trait="OPE",
            origin_correct=frozenset({"a", "b", "c"}),
            aug_correct=frozenset({"b", "c", "d"}),
            n_items=4,
            administered_ids=frozenset({"a", "b", "c", "d"}),
        )
        s_origin, s_consist, s_ps = scores.scores()
        assert s_origin == 0.75
        assert s_consist == 2 / 3
        assert s_ps == 0.5

    def test_consistency_zero_when_nothing_keyed(self):
        scores = TraitScoreSet(
            trait="OPE", origin_correct=frozenset(), aug_correct=frozenset({"a"}),
            n_items=2, administered_ids=frozenset({"a", "b"}),
        )
        assert scores.scores() == (0.0, 0.0, 0.0)

    def test_subsets_enforced(self):
        with pytest.raises(ValidationError):
            TraitScoreSet(
                trait="OPE", origin_correct=frozenset({"z"}), aug_correct=frozenset(),
                n_items=1, administered_ids=frozenset({"a"}),
            )


class TestTrajectoryBuffer:
    """Buffer ordering and lookup"""

    def test_step_counter(self):
        buffer = TrajectoryBuffer()
        assert buffer.step_counter == 0
        buffer.append_step([scored("a", 0.1, 0)])
        buffer.append_step([scored("b", 0.2, 1), scored("c", 0.3, 1)])
        assert buffer.step_counter == 2
        assert buffer.steps() == [0, 1]
        assert len(buffer.at_step(1)) == 2

    def test_ranking_ties_prefer_earliest_step_then_id(self):
        buffer = TrajectoryBuffer(entries=[scored("late", 0.5, 3), scored("zeta", 0.5, 2), scored("alpha", 0.5, 2)])
        ranked = buffer.ranked()
        assert [e.step for e in ranked] == [2, 2, 3]
        assert ranked[0].prompt.id < ranked[1].prompt.id

    def test_best_and_top_n(self):
        buffer = TrajectoryBuffer(entries=[scored("a", 0.2, 1), scored("b", 0.9, 1), scored("c", 0.5, 2)])
        assert buffer.best().prompt.text == "b"
        assert [e.s_ps for e in buffer.top_n(2)] == [0.9, 0.5]
        assert TrajectoryBuffer().best() is None


class TestMetaPrompt:
    """Meta-prompt ordering invariant"""

    def test_descending_block_rejected(self):
        with pytest.raises(ValidationError, match="ascending"):
            MetaPrompt(
                task_instruct="t", problem_examples=[], format_directive="f",
                trajectory_block=[TrajectoryEntry(text="a", score=0.9), TrajectoryEntry(text="b", score=0.1)],
            )


class TestChatRequest:
    """Request hashing"""

    def test_hash_depends_on_every_field(self):
        base = ChatRequest(model_id="m", user="hi")
        assert base.request_hash == ChatRequest(model_id="m", user="hi").request_hash
        assert base.request_hash != ChatRequest(model_id="m", user="hi", temperature=0.5).request_hash
        assert base.request_hash != ChatRequest(model_id="m", user="hi", system="s").request_hash
        assert len(base.request_hash) == 32


class TestConditionAndReport:
    """Evaluation condition and report invariants"""

    def test_origin_carries_no_prompt(self):
        with pytest.raises(ValidationError):
            Condition(name=ConditionName.ORIGIN, prompt_text="hello")

    def test_profile_needs_run_reference(self):
        with pytest.raises(ValidationError):
            Condition(name=ConditionName.PROFILE)

    def test_naive_display_names(self):
        assert Condition(name="naive", naive_template="prefix", naive_prefix="very").display_name == "naive:very"
        assert Condition(name="naive", naive_template="prefix", naive_prefix="").display_name == "naive:-"
        assert Condition(name="naive", naive_template="instruction").display_name == "naive"

    def test_report_needs_exactly_one_family(self):
        with pytest.raises(ValidationError, match="exactly one"):
            EvaluationReport(model_id="m", condition="origin", trait="OPE")
        failed = EvaluationReport(model_id="m", condition="origin", trait="OPE", status=CellStatus.FAILED, error="x")
        assert failed.value is None
