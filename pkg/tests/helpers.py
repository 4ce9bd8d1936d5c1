"""Synthetic item banks and scripted responders shared by the test suite."""
import hashlib
import random
import re
import threading

from profile_tuner.pydantic_models import (
    ChatRequest, Keyed, LikertItem, LikertKeying, Option, QuestionItem, TraitDimension,
)

OPTION_LINE = re.compile(r"^([A-D])\. (.*)$", re.MULTILINE)
LIKERT_POSITION = re.compile(r"Statement (\d+)/(\d+): (.*)")
MAGIC = re.compile(r"magic(\d+)")
LEVEL = re.compile(r"level (\d+)")


def make_options(source_id: str) -> tuple[Option, ...]:
    return (
        Option(label="A", text=f"High move one for {source_id}", keyed=Keyed.HIGH),
        Option(label="B", text=f"Low move one for {source_id}", keyed=Keyed.LOW),
        Option(label="C", text=f"High move two for {source_id}", keyed=Keyed.HIGH),
        Option(label="D", text=f"Low move two for {source_id}", keyed=Keyed.LOW),
    )


def make_item(item_id: str, trait: TraitDimension = TraitDimension.OPENNESS, scenario: str | None = None) -> QuestionItem:
    return QuestionItem(
        id=item_id,
        trait=trait,
        scenario=scenario or f"Scenario for {item_id}.",
        question="What do you do?",
        options=make_options(item_id),
    )


def make_twin(item: QuestionItem, scenario: str | None = None) -> QuestionItem:
    return QuestionItem(
        id=f"{item.id}__aug",
        trait=item.trait,
        scenario=scenario or f"Reworded: {item.scenario}",
        question="How would you respond?",
        options=item.options,
        paraphrase_of=item.id,
    )


def make_bank(
    n: int,
    trait: TraitDimension = TraitDimension.OPENNESS,
    twins: bool = True,
    prefix: str | None = None,
) -> list[QuestionItem]:
    """n originals (ids <code>-000...) followed by one twin each."""
    prefix = prefix or trait.code
    origins = [make_item(f"{prefix}-{i:03d}", trait) for i in range(n)]
    return origins + ([make_twin(o) for o in origins] if twins else [])


def make_leveled_bank(levels: int, trait: TraitDimension = TraitDimension.OPENNESS) -> list[QuestionItem]:
    """Items whose scenario names the number of magic tokens a profile needs to answer them high."""
    origins = [make_item(f"{trait.code}-{i:03d}", trait, scenario=f"Situation at level {i + 1}.") for i in range(levels)]
    return origins + [make_twin(o, scenario=f"Reworded situation at level {i + 1}.") for i, o in enumerate(origins)]


def make_likert_bank(per_trait: int = 4) -> list[LikertItem]:
    items = []
    for trait in TraitDimension:
        for i in range(per_trait):
            items.append(LikertItem(
                id=f"{trait.code}-L{i}",
                trait=trait,
                statement=f"I am someone who shows {trait.noun} in way {i}.",
                keying=LikertKeying.NEGATIVE if i % 2 else LikertKeying.POSITIVE,
            ))
    return items


# ========== Responders ==========

def presented(request: ChatRequest) -> dict[str, str]:
    return dict(OPTION_LINE.findall(request.user))


def pick_prefix(request: ChatRequest, prefix: str) -> str:
    for position, text in presented(request).items():
        if text.startswith(prefix):
            return position
    return "A"


def always_high(request: ChatRequest) -> str:
    return pick_prefix(request, "High")


def always_low(request: ChatRequest) -> str:
    return pick_prefix(request, "Low")


def random_choice(request: ChatRequest) -> str:
    """Uniform over the four positions, reproducible per request."""
    return random.Random(request.request_hash).choice("ABCD")


def content_keyed(request: ChatRequest) -> str:
    """Chooses by option content only, so the choice survives any reordering."""
    options = presented(request)
    scenario = request.user.split("Scenario:", 1)[-1].split("\n", 1)[0]
    best = min(options, key=lambda p: hashlib.sha256(f"{scenario}|{options[p]}|{request.system}".encode()).hexdigest())
    return best


def hill_optimizer(request: ChatRequest) -> str:
    """Copies the best-known profile and adds one more magic token."""
    found = [int(m) for m in MAGIC.findall(request.user)]
    count = max(found, default=0) + 1
    tokens = " ".join(f"magic{i}" for i in range(1, count + 1))
    variant = (request.seed_hint or 0) % 997
    return f"Sure, here it is.\n<PROFILE>A persona, draft {variant}: {tokens}</PROFILE>"


def hill_target(request: ChatRequest) -> str:
    """High answer iff the profile carries at least as many magic tokens as the item's level."""
    tokens = len(set(MAGIC.findall(request.system or "")))
    level = int(LEVEL.search(request.user).group(1))
    return always_high(request) if tokens >= level else always_low(request)


def position_biased_rating(request: ChatRequest) -> str:
    """Rates by position in the questionnaire, ignoring content."""
    match = LIKERT_POSITION.search(request.user)
    position, total = int(match.group(1)), int(match.group(2))
    return "5" if position <= total // 2 else "1"


def content_rating(request: ChatRequest) -> str:
    statement = LIKERT_POSITION.search(request.user).group(3)
    return str(int(hashlib.sha256(statement.encode()).hexdigest(), 16) % 5 + 1)


class PartlyMalformedOptimizer:
    """Of every `period` calls, the last `malformed` ones carry no profile block."""

    def __init__(self, period: int = 8, malformed: int = 3):
        self.period = period
        self.malformed = malformed
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, request: ChatRequest) -> str:
        with self._lock:
            index = self.calls % self.period
            self.calls += 1
        if index >= self.period - self.malformed:
            return "I could not come up with anything this time."
        return hill_optimizer(request)
