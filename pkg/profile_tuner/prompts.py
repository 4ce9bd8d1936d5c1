"""
Default prompt templates.

All of these are overridable through configuration (inline strings) or template
files; the defaults are working texts, not verbatim copies of any published figure.
"""

PROFILE_OPEN = "<PROFILE>"
PROFILE_CLOSE = "</PROFILE>"

DEFAULT_TASK_INSTRUCTION = (
    "Read the situation below and pick the option that best matches what you "
    "would actually do. Answer with the letter of a single option (A, B, C or D)."
)

DEFAULT_LIKERT_INSTRUCTION = (
    "Rate how accurately each statement describes you, using this scale:\n"
    "1 = very inaccurate, 2 = moderately inaccurate, 3 = neither accurate nor inaccurate, "
    "4 = moderately accurate, 5 = very accurate."
)

LIKERT_ANCHORS = {
    "very inaccurate": 1,
    "moderately inaccurate": 2,
    "neither accurate nor inaccurate": 3,
    "moderately accurate": 4,
    "very accurate": 5,
}

DEFAULT_PARAPHRASE_TEMPLATE = """Rewrite the scenario and the question below so that they keep exactly the same meaning but use different wording.
Do not alter, add or remove any answer options; they are not shown to you on purpose.

Scenario: {scenario}
Question: {question}

Return ONLY valid JSON:
{{
    "scenario": "rewritten scenario",
    "question": "rewritten question"
}}"""

DEFAULT_META_TASK = """Your task is to write a persona profile for an AI assistant. The profile is given to the assistant as its role-play description before it faces everyday situations, and it should make the assistant's behaviour show strong {trait} ({trait_code}) in every scenario.
A good profile describes a concrete person: career, values, hobbies, relationships and typical behaviour patterns.

Each profile below was evaluated with two signals:
- personality score: how often the assistant, playing the profile, chose the behaviour typical of high {trait};
- consistency score: how stable those choices stayed when the same situation was described in other words.
The number shown next to each profile combines both (the share of situations answered in character under both wordings), from 0 to 1. Higher is better."""

DEFAULT_META_TEMPLATE = """{task_instruct}

Below are previous profiles with their scores, in ascending order of score:

{trajectory}

The profile will be used in situations such as:

{problem_examples}

{format_directive}"""

DEFAULT_FORMAT_DIRECTIVE = (
    "Write one new profile that is different from the ones above and achieves a higher score. "
    f"Put the profile text, and nothing else, between {PROFILE_OPEN} and {PROFILE_CLOSE}."
)

# BFI-style adjective sets used by the description-prompt baseline.
TRAIT_DESCRIPTIONS = {
    "Openness": "original, curious about many different things, ingenious, imaginative, inventive, artistic, and fond of reflecting and playing with ideas",
    "Conscientiousness": "thorough, reliable, hard-working, persevering until the task is finished, efficient, and a planner who follows through",
    "Extraversion": "talkative, full of energy, enthusiastic, assertive, outgoing and sociable",
    "Agreeableness": "helpful and unselfish with others, forgiving, trusting, considerate and kind to almost everyone, and cooperative",
    "Neuroticism": "often depressed or blue, tense, prone to worry, emotionally unstable, moody and easily nervous",
}

DEFAULT_DESCRIPTION_PROMPT = (
    "You are an assistant with {personality}. "
    "In other words, you are {description}."
)

DEFAULT_P2_PROMPT = (
    "You are a person whose character is defined by {personality}. "
    "People who know you describe you as {description}. "
    "This shows in how you talk, what you choose to do with your time, and how you react "
    "when things go well or badly. Stay in this character in everything you answer."
)

NAIVE_INSTRUCTION_PROMPT = "Choose the option that shows {personality}."
NAIVE_PREFIX_PROMPT = "You are an assistant with {prefix} {personality}"
NAIVE_PREFIXES = ("a bit", "", "very")

DEFAULT_SUMMARY_TEMPLATE = """Summarize the persona profile below in a single sentence that captures its storyline and the personality it conveys.

Profile:
{profile}

Return only the sentence."""
