"""Operator prompt templates: built-ins plus a named-section override file.

Two strings are load-bearing and may never be edited, even by override
files: the system preamble sent as the first message of every operator
request, and the hint suffix that closes both reflection requests. Loading
validates overrides against them byte-for-byte.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields, replace

from .errors import ValidationError

SYSTEM_PREAMBLE = (
    "You are an expert in the domain of optimization prompts. "
    "Your task is to give hints to design better prompts."
)

HINT_SUFFIX = (
    "For example, you can try to recommend word replacements, "
    "active/positive voice conversions, adding words, or deleting words."
)

PLACEHOLDER_FIELDS = (
    "task_description",
    "seed_prompt",
    "n_paraphrases",
    "better_prompt",
    "worse_prompt",
    "better_score",
    "worse_score",
    "short_term_hint",
    "long_term_memory",
    "elite_prompt",
    "elite_score",
    "prior_memory",
    "new_hints",
    "memory_text",
    "char_cap",
    "memory_block",
    "parent_a",
    "parent_b",
    "hint_suffix",
)

_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDER_FIELDS) + r")\}")

DEFAULT_PARAPHRASE = """\
Generate {n_paraphrases} alternative phrasings of the following prompt. \
Keep the original intent and task unchanged, but vary the wording and structure.

Prompt: {seed_prompt}

Respond with a JSON array of exactly {n_paraphrases} strings and nothing else."""

DEFAULT_SHORT_TERM_REFLECTION = """\
Task description: {task_description}

Below are two prompts for this task with their measured scores. \
The first performs better than the second.

Better prompt (score {better_score}): {better_prompt}

Worse prompt (score {worse_score}): {worse_prompt}

Study the difference between the two prompts and give a short hint that would \
help design a better prompt. {hint_suffix}"""

DEFAULT_LONG_TERM_REFLECTION = """\
Task description: {task_description}

You are accumulating knowledge for designing better prompts over the course \
of an evolutionary run.

Knowledge so far:
{prior_memory}

New hints from the current epoch:
{new_hints}

Consolidate the knowledge and the new hints into an updated, de-duplicated \
set of concise guidelines for designing better prompts. {hint_suffix}"""

DEFAULT_MEMORY_SUMMARIZE = """\
Task description: {task_description}

The following prompt-design notes have grown too long. Rewrite them in at \
most {char_cap} characters, keeping the guidance most useful for designing \
better prompts.

Notes:
{memory_text}

{hint_suffix}"""

DEFAULT_CROSSOVER = """\
Task description: {task_description}

Below are two parent prompts for this task with their measured scores.

Better prompt (score {better_score}): {better_prompt}

Worse prompt (score {worse_score}): {worse_prompt}

Hint: {short_term_hint}

{memory_block}Following the hint, combine the strengths of the two parent \
prompts into one new prompt for this task. Respond with the new prompt text only."""

DEFAULT_ELITIST_MUTATION = """\
Task description: {task_description}

Below is the best prompt found so far for this task.

Elite prompt (score {elite_score}): {elite_prompt}

{memory_block}Rewrite the elite prompt into an improved version. You decide \
whether to change its structure, its wording, or both. Respond with the new \
prompt text only."""

DEFAULT_BASELINE_CROSSOVER = """\
Task description: {task_description}

Parent prompt 1: {parent_a}

Parent prompt 2: {parent_b}

Combine the two parent prompts into one new prompt for this task. Respond \
with the new prompt text only."""

DEFAULT_BASELINE_MUTATION = """\
Task description: {task_description}

Prompt: {seed_prompt}

Mutate this prompt: produce one altered variant that still addresses the \
task. Respond with the new prompt text only."""

MEMORY_BLOCK_TEMPLATE = "Accumulated guidance from previous epochs:\n{long_term_memory}\n\n"


@dataclass(frozen=True)
class OperatorTemplates:
    """The full template set used by the reflection and baseline operators."""

    system_preamble: str = SYSTEM_PREAMBLE
    hint_suffix: str = HINT_SUFFIX
    paraphrase: str = DEFAULT_PARAPHRASE
    short_term_reflection: str = DEFAULT_SHORT_TERM_REFLECTION
    long_term_reflection: str = DEFAULT_LONG_TERM_REFLECTION
    memory_summarize: str = DEFAULT_MEMORY_SUMMARIZE
    crossover: str = DEFAULT_CROSSOVER
    elitist_mutation: str = DEFAULT_ELITIST_MUTATION
    baseline_crossover: str = DEFAULT_BASELINE_CROSSOVER
    baseline_mutation: str = DEFAULT_BASELINE_MUTATION

    def validate(self) -> None:
        if self.system_preamble != SYSTEM_PREAMBLE:
            raise ValidationError("system_preamble must match the built-in string exactly")
        if self.hint_suffix != HINT_SUFFIX:
            raise ValidationError("hint_suffix must match the built-in string exactly")
        probe = {f: "x" for f in PLACEHOLDER_FIELDS}
        probe["hint_suffix"] = HINT_SUFFIX
        for name in ("short_term_reflection", "long_term_reflection", "memory_summarize"):
            if not render(getattr(self, name), probe).endswith(HINT_SUFFIX):
                raise ValidationError(f"{name} template must end with the hint suffix")
        required = {
            "paraphrase": ("seed_prompt", "n_paraphrases"),
            "short_term_reflection": ("task_description", "better_prompt", "worse_prompt",
                                      "better_score", "worse_score"),
            "long_term_reflection": ("task_description", "prior_memory", "new_hints"),
            "memory_summarize": ("memory_text", "char_cap"),
            "crossover": ("task_description", "better_prompt", "worse_prompt",
                          "short_term_hint", "memory_block"),
            "elitist_mutation": ("task_description", "elite_prompt", "memory_block"),
            "baseline_crossover": ("task_description", "parent_a", "parent_b"),
            "baseline_mutation": ("task_description", "seed_prompt"),
        }
        for name, placeholders in required.items():
            text = getattr(self, name)
            for ph in placeholders:
                if "{" + ph + "}" not in text:
                    raise ValidationError(f"{name} template is missing {{{ph}}}")


def render(template: str, values: dict[str, object]) -> str:
    """Substitute known placeholders in a single pass.

    A single-pass regex keeps substituted values from being re-scanned, so
    prompt texts containing braces can never corrupt the rendering.
    """

    def _sub(match: re.Match) -> str:
        key = match.group(1)
        if key in values:
            return str(values[key])
        return match.group(0)

    return _PLACEHOLDER_RE.sub(_sub, template)


_SECTION_RE = re.compile(r"^\[([a-z_]+)\]\s*$")


def parse_sections(text: str) -> dict[str, str]:
    """Parse a named-section template file into {section: body}."""
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in text.splitlines():
        header = _SECTION_RE.match(line)
        if header:
            current = header.group(1)
            if current in sections:
                raise ValidationError(f"duplicate template section [{current}]")
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
        elif line.strip():
            raise ValidationError("template file content before first [section] header")
    return {name: "\n".join(lines).strip("\n") for name, lines in sections.items()}


def load_templates(path: str | None = None) -> OperatorTemplates:
    """Built-in templates, with optional overrides from a section file."""
    templates = OperatorTemplates()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            sections = parse_sections(fh.read())
        known = {f.name for f in fields(OperatorTemplates)}
        unknown = set(sections) - known
        if unknown:
            raise ValidationError(f"unknown template sections: {sorted(unknown)}")
        templates = replace(templates, **sections)
    templates.validate()
    return templates
