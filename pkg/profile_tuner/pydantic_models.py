from pathlib import Path
from typing import Annotated, Any, Literal, Optional
from enum import Enum

import openai
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator

from profile_tuner.config import settings
from profile_tuner.prompts import (
    DEFAULT_TASK_INSTRUCTION, DEFAULT_LIKERT_INSTRUCTION, DEFAULT_PARAPHRASE_TEMPLATE,
    DEFAULT_DESCRIPTION_PROMPT, DEFAULT_P2_PROMPT, NAIVE_INSTRUCTION_PROMPT,
    NAIVE_PREFIX_PROMPT, DEFAULT_SUMMARY_TEMPLATE,
)
from profile_tuner.utils import canonical_json, content_hash

FROZEN = ConfigDict(frozen=True)

# ========== Vocabulary ==========

class TraitDimension(str, Enum):
    OPENNESS = "Openness"
    CONSCIENTIOUSNESS = "Conscientiousness"
    EXTRAVERSION = "Extraversion"
    AGREEABLENESS = "Agreeableness"
    NEUROTICISM = "Neuroticism"

    @property
    def code(self) -> str:
        return _TRAIT_CODES[self]

    @property
    def noun(self) -> str:
        """Lower-case trait name as used inside prompt sentences."""
        return self.value.lower()

    @property
    def plateaus(self) -> bool:
        """Traits that saturate early and get the shorter default schedule."""
        return self in (TraitDimension.AGREEABLENESS, TraitDimension.CONSCIENTIOUSNESS)

    @classmethod
    def parse(cls, value: "str | TraitDimension") -> "TraitDimension":
        if isinstance(value, TraitDimension):
            return value
        key = str(value).strip().lower()
        for trait in cls:
            if key in (trait.value.lower(), trait.code.lower()):
                return trait
        raise ValueError(f"Unknown Big-Five trait: {value!r}")


_TRAIT_CODES = {
    TraitDimension.OPENNESS: "OPE",
    TraitDimension.CONSCIENTIOUSNESS: "CON",
    TraitDimension.EXTRAVERSION: "EXT",
    TraitDimension.AGREEABLENESS: "AGR",
    TraitDimension.NEUROTICISM: "NEU",
}

# Accepts full names and short codes
Trait = Annotated[TraitDimension, BeforeValidator(TraitDimension.parse)]

DARK_TRIAD_LABELS = frozenset({
    "machiavellianism", "narcissism", "psychopathy", "mac", "nar", "psy",
})


def is_dark_triad(label: Any) -> bool:
    return str(label).strip().lower() in DARK_TRIAD_LABELS


class Keyed(str, Enum):
    HIGH = "high"
    LOW = "low"


class LikertKeying(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class OriginKind(str, Enum):
    SEED = "seed"
    GENERATED = "generated"
    BASELINE = "baseline"


# ========== Prompts and items ==========

class PromptOrigin(BaseModel):
    model_config = FROZEN

    kind: OriginKind
    step: Optional[int] = None        # generated(step_index)
    baseline: Optional[str] = None    # baseline(kind), e.g. "origin"


class PersonaPrompt(BaseModel):
    """A candidate persona profile. The id is the content hash of the text."""
    model_config = FROZEN

    text: str
    origin: PromptOrigin
    id: str = ""

    @model_validator(mode="before")
    @classmethod
    def _assign_id(cls, data: Any) -> Any:
        if isinstance(data, dict):
            expected = content_hash(data.get("text", ""))
            if data.get("id") and data["id"] != expected:
                raise ValueError(f"prompt id {data['id']} does not match its text")
            data = {**data, "id": expected}
        return data

    @model_validator(mode="after")
    def _check_text(self) -> "PersonaPrompt":
        if not self.text.strip() and not self.is_origin:
            raise ValueError("persona prompt text must be non-empty")
        return self

    @property
    def is_origin(self) -> bool:
        return self.origin.kind == OriginKind.BASELINE and self.origin.baseline == "origin"

    @classmethod
    def origin_baseline(cls) -> "PersonaPrompt":
        """The empty persona: the target model sees no system prompt at all."""
        return cls(text="", origin=PromptOrigin(kind=OriginKind.BASELINE, baseline="origin"))

    @classmethod
    def baseline(cls, text: str, kind: str) -> "PersonaPrompt":
        return cls(text=text, origin=PromptOrigin(kind=OriginKind.BASELINE, baseline=kind))

    @classmethod
    def seed(cls, text: str) -> "PersonaPrompt":
        return cls(text=text, origin=PromptOrigin(kind=OriginKind.SEED, step=0))

    @classmethod
    def generated(cls, text: str, step: int) -> "PersonaPrompt":
        return cls(text=text, origin=PromptOrigin(kind=OriginKind.GENERATED, step=step))


class Option(BaseModel):
    model_config = FROZEN

    label: str
    text: str
    keyed: Keyed


class QuestionItem(BaseModel):
    """
    Situational multiple-choice item. Structural invariants (4 options, 2 high /
    2 low, same-trait twins) are checked by validation.validate_item_bank so that
    broken banks can be reported rather than rejected one record at a time.
    """
    model_config = FROZEN

    id: str
    trait: Trait
    scenario: str
    question: str
    options: tuple[Option, ...]
    paraphrase_of: Optional[str] = None

    @property
    def is_twin(self) -> bool:
        return self.paraphrase_of is not None

    @property
    def source_id(self) -> str:
        """Id of the original item (itself unless this is a paraphrase twin)."""
        return self.paraphrase_of or self.id

    def option(self, label: str) -> Option:
        for option in self.options:
            if option.label == label:
                return option
        raise KeyError(f"item {self.id} has no option {label!r}")


class LikertItem(BaseModel):
    model_config = FROZEN

    id: str
    trait: Trait
    statement: str = Field(..., min_length=1)
    keying: LikertKeying = LikertKeying.POSITIVE


class ScoredPrompt(BaseModel):
    """A prompt with its paraphrase-aware trait scores on a question sample."""
    model_config = FROZEN

    prompt: PersonaPrompt
    trait: Trait
    s_ps: float = Field(..., ge=0.0, le=1.0)
    s_consist: float = Field(..., ge=0.0, le=1.0)
    s_origin: float = Field(..., ge=0.0, le=1.0)
    step: int = Field(..., ge=0)
    question_sample: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _check_ordering(self) -> "ScoredPrompt":
        if self.s_ps > self.s_origin + 1e-12:
            raise ValueError(f"s_ps {self.s_ps} exceeds s_origin {self.s_origin}")
        return self


class ValidationReport(BaseModel):
    n_items: int
    per_trait_counts: dict[str, int]
    paraphrase_coverage: float
    violations: list[str] = []

    @property
    def valid(self) -> bool:
        return not self.violations


# ========== Backend ==========

class ChatRequest(BaseModel):
    model_config = FROZEN

    model_id: str
    system: Optional[str] = None
    user: str = Field(..., min_length=1)
    temperature: float = Field(0.0, ge=0.0)
    max_tokens: int = 256
    seed_hint: Optional[int] = None

    def cache_key(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    @property
    def request_hash(self) -> str:
        return content_hash(canonical_json(self.cache_key()), length=32)


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH = "length"
    CONTENT_FILTER = "content_filter"
    OTHER = "other"


class Usage(BaseModel):
    model_config = FROZEN

    prompt_tokens: int = 0
    completion_tokens: int = 0
    total_tokens: int = 0


class ChatResponse(BaseModel):
    model_config = FROZEN

    text: str
    finish_reason: FinishReason = FinishReason.STOP
    usage: Usage = Field(default_factory=Usage)
    cached: bool = False


class MockRule(BaseModel):
    """
    One scripted rule. A rule matches when every given matcher matches the
    selected request field and the script is in `when_state` (if set). With
    field "any" the system and user messages are tried one at a time.
    `response` is a str.format template over {system}, {user}, {state}, {hash}.
    `choices` picks one entry deterministically from the request hash and script seed.
    """
    model_config = FROZEN

    contains: Optional[str] = None
    regex: Optional[str] = None
    field: Literal["user", "system", "any"] = "any"
    when_state: Optional[str] = None
    response: Optional[str] = None
    choices: Optional[list[str]] = None
    next_state: Optional[str] = None
    fail: bool = False


class MockScript(BaseModel):
    model_config = FROZEN

    rules: list[MockRule] = []
    default_response: str = ""
    initial_state: str = "start"
    seed: int = 0


class TracedCall(BaseModel):
    """Payload traced for every backend call."""
    request: ChatRequest
    response: Optional[ChatResponse] = None
    error: Optional[str] = None


# ========== Dataset ==========

class SplitSpec(BaseModel):
    trait: Trait
    train_size: int = Field(200, ge=0)
    test_size: int = Field(800, ge=0)
    seed: int = 0


class SplitManifest(BaseModel):
    trait: Trait
    seed: int
    train_ids: list[str]
    test_ids: list[str]


class AugmentationResult(BaseModel):
    items: list[QuestionItem]
    failures: dict[str, str] = {}


# ========== Scoring ==========

class Administration(BaseModel):
    """Record of one persona-prompted multiple-choice administration."""
    model_config = FROZEN

    item_id: str
    source_id: str
    prompt_id: str
    presented_order: tuple[str, ...]
    raw_response: str
    parsed_choice: Optional[str] = None
    is_target_keyed: Optional[bool] = None

    @model_validator(mode="after")
    def _check_choice(self) -> "Administration":
        if self.parsed_choice is not None and self.parsed_choice not in self.presented_order:
            raise ValueError(f"parsed choice {self.parsed_choice!r} was not presented")
        if (self.parsed_choice is None) != (self.is_target_keyed is None):
            raise ValueError("is_target_keyed must be set exactly when a choice was parsed")
        return self

    @property
    def f(self) -> int:
        """Binary trait score: 1 iff a target-keyed option was chosen."""
        return 1 if self.is_target_keyed else 0


class TraitScoreSet(BaseModel):
    trait: Trait
    origin_correct: frozenset[str]
    aug_correct: frozenset[str]
    n_items: int
    administered_ids: frozenset[str]
    untwinned: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _check_subsets(self) -> "TraitScoreSet":
        if not self.origin_correct <= self.administered_ids or not self.aug_correct <= self.administered_ids:
            raise ValueError("score sets must be subsets of the administered ids")
        return self

    def scores(self) -> tuple[float, float, float]:
        """(s_origin, s_consist, s_ps); s_consist is 0 when nothing was target-keyed."""
        both = len(self.origin_correct & self.aug_correct)
        s_origin = len(self.origin_correct) / self.n_items if self.n_items else 0.0
        s_consist = both / len(self.origin_correct) if self.origin_correct else 0.0
        s_ps = both / self.n_items if self.n_items else 0.0
        return s_origin, s_consist, s_ps


class LikertAdministration(BaseModel):
    model_config = FROZEN

    trial: int
    position: int
    item_id: str
    trait: Trait
    raw_response: str
    raw_rating: Optional[int] = None
    scored: Optional[int] = None


class LikertTrialResult(BaseModel):
    trial: int
    trait_means: dict[str, Optional[float]]
    skipped: int
    n_items: int
    valid: bool


class LikertTraitStats(BaseModel):
    trait: Trait
    mean: Optional[float] = None
    std: Optional[float] = None
    trial_means: list[float] = []


class LikertReport(BaseModel):
    trials: list[LikertTrialResult]
    per_trait: dict[str, LikertTraitStats]
    grand_mean: Optional[float] = None
    average_std: Optional[float] = None
    invalid_trials: list[int] = []


# ========== Optimizer ==========

class TrajectoryEntry(BaseModel):
    model_config = FROZEN

    text: str
    score: float


class MetaPrompt(BaseModel):
    task_instruct: str
    trajectory_block: list[TrajectoryEntry]
    problem_examples: list[str]
    format_directive: str

    @field_validator("trajectory_block")
    @classmethod
    def _ascending(cls, block: list[TrajectoryEntry]) -> list[TrajectoryEntry]:
        scores = [entry.score for entry in block]
        if scores != sorted(scores):
            raise ValueError("trajectory block must be in ascending score order")
        return block


class TrajectoryBuffer(BaseModel):
    """Append-only store of every scored prompt of a run, across steps."""
    entries: list[ScoredPrompt] = []

    @property
    def step_counter(self) -> int:
        return max((e.step for e in self.entries), default=-1) + 1

    def append_step(self, entries: list[ScoredPrompt]) -> None:
        self.entries.extend(entries)

    def steps(self) -> list[int]:
        return sorted({e.step for e in self.entries})

    def at_step(self, step: int) -> list[ScoredPrompt]:
        return [e for e in self.entries if e.step == step]

    def ranked(self) -> list[ScoredPrompt]:
        """Best first: highest s_ps, then earliest step, then id."""
        return sorted(self.entries, key=lambda e: (-e.s_ps, e.step, e.prompt.id))

    def top_n(self, n: int) -> list[ScoredPrompt]:
        return self.ranked()[:n]

    def best(self) -> Optional[ScoredPrompt]:
        ranked = self.ranked()
        return ranked[0] if ranked else None


class StepRecord(BaseModel):
    """Progress record appended once per completed step (step 0 = seeding)."""
    step: int = Field(..., ge=0)
    question_sample: tuple[str, ...]
    candidates: int = 0
    dropped: int = 0


class OptimizationResult(BaseModel):
    best: ScoredPrompt
    entries: list[ScoredPrompt]
    steps_completed: int
    dropped_per_step: dict[int, int] = {}
    rescored: list[ScoredPrompt] = []
    config_hash: str
    run_dir: Optional[Path] = None


# ========== Evaluation ==========

class ConditionName(str, Enum):
    ORIGIN = "origin"
    DESCRIPTION_PROMPT = "description_prompt"
    P2 = "p2"
    PROFILE = "profile"
    PROFILE_STAR = "profile_star"
    NAIVE = "naive"
    CUSTOM = "custom"


class Condition(BaseModel):
    """
    A prompt condition. `prompt_path` points at a run directory (profile,
    profile_star) or a prompt/checkpoint JSON file (custom).
    """
    model_config = FROZEN

    name: ConditionName
    prompt_text: Optional[str] = None
    prompt_path: Optional[Path] = None
    naive_template: Optional[Literal["instruction", "prefix"]] = None
    naive_prefix: Optional[str] = None
    source_model: Optional[str] = None
    label: Optional[str] = None

    @model_validator(mode="after")
    def _check_source(self) -> "Condition":
        if self.name == ConditionName.ORIGIN and (self.prompt_text or self.prompt_path):
            raise ValueError("origin condition carries no prompt")
        if self.name in (ConditionName.PROFILE, ConditionName.PROFILE_STAR) and not (self.prompt_path or self.prompt_text):
            raise ValueError(f"{self.name.value} condition needs a run directory reference")
        if self.name == ConditionName.NAIVE and self.naive_template is None:
            raise ValueError("naive condition needs a template kind")
        if self.name == ConditionName.CUSTOM and not (self.prompt_path or self.prompt_text):
            raise ValueError("custom condition needs prompt text or a prompt file")
        return self

    @property
    def display_name(self) -> str:
        if self.label:
            return self.label
        if self.name == ConditionName.NAIVE:
            if self.naive_template == "prefix":
                return f"naive:{self.naive_prefix or '-'}"
            return "naive"
        return self.name.value


class CellStatus(str, Enum):
    OK = "ok"
    FAILED = "failed"


class EvaluationReport(BaseModel):
    model_id: str
    condition: str
    trait: Trait
    status: CellStatus = CellStatus.OK
    scores: Optional[ScoredPrompt] = None
    likert: Optional[LikertTraitStats] = None
    n_items: int = 0
    log_path: Optional[str] = None
    self_transfer: bool = False
    error: Optional[str] = None

    @model_validator(mode="after")
    def _one_family(self) -> "EvaluationReport":
        if self.status == CellStatus.OK and (self.scores is None) == (self.likert is None):
            raise ValueError("exactly one of the TRAIT or Likert score families must be populated")
        return self

    @property
    def value(self) -> Optional[float]:
        """Headline number: s_ps on the TRAIT path, mean rating on the Likert path."""
        if self.scores is not None:
            return self.scores.s_ps
        if self.likert is not None:
            return self.likert.mean
        return None


# ========== Trajectory ==========

class CurvePoint(BaseModel):
    model_config = FROZEN

    step: int
    value: float


class Curve(BaseModel):
    trait: Trait
    statistic: Literal["mean", "max"] = "mean"
    window: int
    points: list[CurvePoint]
    smoothed: list[CurvePoint]


class Checkpoint(BaseModel):
    step: int
    trait: Trait
    prompt: PersonaPrompt
    s_ps: float
    question_sample: tuple[str, ...]
    seed: int
    summary: Optional[str] = None


class CheckpointSummary(BaseModel):
    step: int
    summary: Optional[str] = None
    error: Optional[str] = None


# ========== Configuration Models ==========

class BackendConfig(BaseModel):
    """Chat backend configuration: a live OpenAI-compatible endpoint or a scripted mock."""
    kind: Literal["openai", "mock"] = "openai"
    model_id: str = "gpt-4o-mini"
    base_url: Optional[str] = None
    api_key: Optional[str] = None
    max_retries: int = Field(5, ge=0)
    backoff_initial: float = Field(1.0, gt=0)
    backoff_max: float = Field(30.0, gt=0)
    timeout: float = 60.0
    requests_per_minute: Optional[float] = Field(None, gt=0)
    supports_system_role: Optional[bool] = None  # None = infer from model id
    mock_script: Optional[Path] = None
    cache_dir: Optional[Path] = None

    def get_client(self) -> openai.OpenAI:
        """Instantiate OpenAI client; retries are handled by the backend, not the client."""
        return openai.OpenAI(
            base_url=self.base_url or settings.OPENAI_BASE_URL,
            api_key=self.api_key or settings.OPENAI_API_KEY or "not-needed",
            max_retries=0,
            timeout=self.timeout,
        )


class ScoringConfig(BaseModel):
    """How items are administered to the target model."""
    task_instruction: str = DEFAULT_TASK_INSTRUCTION
    invert_keying: bool = False  # optimize toward low trait expression
    target_max_tokens: int = 64
    max_in_flight: int = Field(8, ge=1)
    likert_instruction: str = DEFAULT_LIKERT_INSTRUCTION
    likert_trials: int = Field(15, ge=1)
    likert_items_per_request: int = Field(1, ge=1)
    likert_skip_threshold: float = 0.2


class RunConfig(BaseModel):
    """Optimization run hyperparameters. max_steps defaults to 15 for AGR/CON, 25 otherwise."""
    trait: Trait
    max_steps: int = Field(..., ge=1)
    candidates_per_step: int = Field(8, ge=1)
    trajectory_top_n: int = Field(3, ge=1)
    questions_per_step: int = Field(3, ge=1)
    optimizer_temperature: float = Field(1.2, gt=0)
    target_sampling: Literal["greedy"] = "greedy"
    seed: int = 0
    optimizer_backend: str = "optimizer"
    target_backend: str = "target"
    augmenter_backend: str = "augmenter"
    optimizer_max_tokens: int = 1024
    meta_prompt_token_budget: int = 3000
    meta_prompt_template_path: Optional[Path] = None
    seed_prompts: list[str] = []
    rescore_top_m: int = Field(0, ge=0)
    cache_stochastic: bool = False
    max_in_flight: int = Field(8, ge=1)
    scoring: ScoringConfig = Field(default_factory=ScoringConfig)

    @model_validator(mode="before")
    @classmethod
    def _default_schedule(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("max_steps") is None and data.get("trait") is not None:
            trait = TraitDimension.parse(data["trait"])
            data = {**data, "max_steps": 15 if trait.plateaus else 25}
        return data

    @property
    def target_temperature(self) -> float:
        return 0.0  # greedy

    def config_hash(self) -> str:
        return content_hash(canonical_json(self.model_dump(mode="json")), length=32)


class AugmentationConfig(BaseModel):
    """Configuration for paraphrase-twin generation"""
    backend: str = "augmenter"
    template: str = DEFAULT_PARAPHRASE_TEMPLATE
    temperature: float = 0.0
    max_tokens: int = 512
    max_in_flight: int = Field(8, ge=1)
    min_length: int = 10


class EvaluationConfig(BaseModel):
    """Baseline prompt templates and matrix concurrency"""
    description_template: str = DEFAULT_DESCRIPTION_PROMPT
    p2_template: str = DEFAULT_P2_PROMPT
    naive_instruction_template: str = NAIVE_INSTRUCTION_PROMPT
    naive_prefix_template: str = NAIVE_PREFIX_PROMPT
    summary_template: str = DEFAULT_SUMMARY_TEMPLATE
    max_cells_in_flight: int = Field(2, ge=1)


def _default_backends() -> dict[str, BackendConfig]:
    return {
        "optimizer": BackendConfig(),
        "target": BackendConfig(),
        "augmenter": BackendConfig(),
        "summarizer": BackendConfig(),
    }


class AppConfig(BaseModel):
    """Root configuration for the entire application"""
    backends: dict[str, BackendConfig] = Field(default_factory=_default_backends)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    run: dict[str, Any] = {}  # raw RunConfig overrides; trait is supplied per command
    seed: int = 0
    max_in_flight: int = Field(8, ge=1)


DEFAULT_APP_CONFIG = AppConfig()
