"""LLM-mediated evolutionary operators.

Five reflective operators (seed paraphrasing, short-term reflection,
long-term reflection, hint-guided crossover, elitist mutation) plus the
reflection-free crossover/mutation pair used by the plain-GA comparator.

Every request's first message is the exact system preamble; corrective
reprompts are prepended to the user text so reflection requests keep
ending with the hint suffix.
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace

from .core import LongTermMemory, ParentPair, PromptIndividual, ShortTermReflection, TaskSpec
from .errors import (
    BackendError,
    MalformedOutputError,
    OperatorError,
    UsageError,
    ValidationError,
)
from .gateway import ChatMessage, CompletionResponse, Gateway, build_request
from .templates import MEMORY_BLOCK_TEMPLATE, OperatorTemplates, render

logger = logging.getLogger(__name__)

OPERATOR_MAX_TOKENS = 1024
FLAG_IDENTICAL_TO_PARENT = "identical_to_parent"

_EMPTY_CORRECTION = (
    "Your previous reply was empty. Reply with the requested content this time."
)
_PARSE_CORRECTION = (
    "Your previous reply could not be parsed. "
    "Respond with only a valid JSON array of strings."
)


def _request(templates: OperatorTemplates, user_text: str, purpose: str, temperature: float):
    messages = [
        ChatMessage("system", templates.system_preamble),
        ChatMessage("user", user_text),
    ]
    return build_request(messages, purpose, temperature, max_tokens=OPERATOR_MAX_TOKENS)


def _complete_nonempty(
    gateway: Gateway,
    templates: OperatorTemplates,
    user_text: str,
    purpose: str,
    temperature: float,
    reprompts: int = 2,
) -> CompletionResponse:
    """Issue a request, reprompting on empty output up to ``reprompts`` times."""
    text = user_text
    for attempt in range(reprompts + 1):
        try:
            return gateway.complete(_request(templates, text, purpose, temperature))
        except MalformedOutputError:
            if attempt == reprompts:
                raise OperatorError(
                    f"{purpose} produced empty output after {reprompts} reprompts",
                    raw_text="",
                )
            text = _EMPTY_CORRECTION + "\n\n" + user_text
    raise AssertionError("unreachable")


def _parse_string_array(text: str, minimum: int) -> list[str] | None:
    """Extract a JSON array of at least ``minimum`` non-empty strings, or None."""
    candidates = [text]
    start, end = text.find("["), text.rfind("]")
    if start != -1 and end > start:
        candidates.append(text[start : end + 1])
    for candidate in candidates:
        try:
            parsed = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if not isinstance(parsed, list):
            continue
        strings = [s.strip() for s in parsed if isinstance(s, str) and s.strip()]
        if len(strings) >= minimum:
            return strings
    return None


def paraphrase_seed(
    seed_prompt: str,
    n: int,
    gateway: Gateway,
    templates: OperatorTemplates,
    temperature: float = 0.7,
) -> list[str]:
    """Ask the LLM for n rephrasings of the seed via a JSON-array reply.

    Unparseable output is reprompted up to 3 total attempts; replies that
    merely duplicate the seed are re-requested up to 2 times, then accepted.
    The seed itself is never part of the returned list.
    """
    seed = seed_prompt.strip()
    if not seed:
        raise ValidationError("seed prompt must be non-empty")
    if n < 1:
        raise UsageError("n must be >= 1")

    base_text = render(templates.paraphrase, {"seed_prompt": seed, "n_paraphrases": n})
    user_text = base_text
    parse_failures = 0
    duplicate_requests = 0
    last_raw = ""
    while True:
        response = _complete_nonempty(gateway, templates, user_text, "paraphrase", temperature)
        last_raw = response.text
        variants = _parse_string_array(response.text, minimum=n)
        if variants is None:
            parse_failures += 1
            if parse_failures >= 3:
                raise OperatorError(
                    f"paraphrase output unparseable after {parse_failures} attempts",
                    raw_text=last_raw,
                )
            user_text = _PARSE_CORRECTION + "\n\n" + base_text
            continue
        variants = variants[:n]
        if seed in variants and duplicate_requests < 2:
            duplicate_requests += 1
            continue
        return variants


def short_term_reflect(
    pair: ParentPair,
    task: TaskSpec,
    gateway: Gateway,
    templates: OperatorTemplates,
    epoch: int,
    temperature: float = 0.7,
) -> ShortTermReflection:
    """Produce a hint contrasting the better and worse parent of a pair."""
    if not pair.constraint_relaxed and not (pair.better.fitness > pair.worse.fitness):
        raise UsageError("parent pair members must have different fitness")
    user_text = render(
        templates.short_term_reflection,
        {
            "task_description": task.description,
            "better_prompt": pair.better.text,
            "worse_prompt": pair.worse.text,
            "better_score": _fmt(pair.better.fitness),
            "worse_score": _fmt(pair.worse.fitness),
            "hint_suffix": templates.hint_suffix,
        },
    )
    response = _complete_nonempty(gateway, templates, user_text, "reflect_short", temperature)
    return ShortTermReflection(
        hint_text=response.text.strip(), pair_ids=pair.ids, epoch=epoch
    )


def long_term_reflect(
    memory: LongTermMemory,
    new_hints: list[ShortTermReflection],
    task: TaskSpec,
    gateway: Gateway,
    templates: OperatorTemplates,
    epoch: int,
    char_cap: int = 4000,
    temperature: float = 0.7,
) -> LongTermMemory:
    """Fold this epoch's hints into the accumulated memory, once per epoch.

    Backend failures leave the memory unchanged with a warning: reflection
    is advisory, so the evolution keeps going. Budget exhaustion propagates
    so the engine can stop gracefully.
    """
    if not new_hints:
        return replace(memory, last_updated_epoch=epoch)

    user_text = render(
        templates.long_term_reflection,
        {
            "task_description": task.description,
            "prior_memory": memory.memory_text if not memory.is_empty else "(none yet)",
            "new_hints": "\n".join(f"- {h.hint_text}" for h in new_hints),
            "hint_suffix": templates.hint_suffix,
        },
    )
    try:
        response = _complete_nonempty(gateway, templates, user_text, "reflect_long", temperature)
        new_text = response.text.strip()
        if len(new_text) > char_cap:
            summary_text = render(
                templates.memory_summarize,
                {
                    "task_description": task.description,
                    "memory_text": new_text,
                    "char_cap": char_cap,
                    "hint_suffix": templates.hint_suffix,
                },
            )
            summary = _complete_nonempty(
                gateway, templates, summary_text, "reflect_long", temperature
            )
            new_text = summary.text.strip()[:char_cap]
    except (BackendError, OperatorError) as exc:
        logger.warning("long-term reflection failed, keeping memory unchanged: %s", exc)
        return memory
    return LongTermMemory(
        memory_text=new_text,
        last_updated_epoch=epoch,
        update_count=memory.update_count + 1,
    )


def crossover(
    pair: ParentPair,
    hint: ShortTermReflection,
    task: TaskSpec,
    gateway: Gateway,
    templates: OperatorTemplates,
    offspring_id: int,
    epoch: int,
    temperature: float = 0.7,
    memory: LongTermMemory | None = None,
) -> PromptIndividual:
    """Combine a parent pair into one offspring, steered by its hint.

    ``memory`` is normally None; passing it injects the long-term memory
    block into the crossover request (experimental wiring, off by default).
    """
    if hint.pair_ids != pair.ids:
        raise UsageError(
            f"hint was produced for pair {hint.pair_ids}, not {pair.ids}"
        )
    memory_block = ""
    if memory is not None and not memory.is_empty:
        memory_block = render(MEMORY_BLOCK_TEMPLATE, {"long_term_memory": memory.memory_text})
    user_text = render(
        templates.crossover,
        {
            "task_description": task.description,
            "better_prompt": pair.better.text,
            "worse_prompt": pair.worse.text,
            "better_score": _fmt(pair.better.fitness),
            "worse_score": _fmt(pair.worse.fitness),
            "short_term_hint": hint.hint_text,
            "memory_block": memory_block,
        },
    )
    response = _complete_nonempty(gateway, templates, user_text, "crossover", temperature)
    child = PromptIndividual(
        id=offspring_id,
        text=response.text.strip(),
        origin="crossover",
        parent_ids=pair.ids,
        epoch_created=epoch,
    )
    if child.text in (pair.better.text, pair.worse.text):
        child = child.with_flag(FLAG_IDENTICAL_TO_PARENT)
    return child


def elitist_mutation(
    elite: PromptIndividual,
    memory: LongTermMemory,
    task: TaskSpec,
    gateway: Gateway,
    templates: OperatorTemplates,
    mutant_id: int,
    epoch: int,
    temperature: float = 0.7,
) -> PromptIndividual:
    """Rewrite the best-so-far prompt, guided by the long-term memory.

    No mutation-type menu is imposed: the model decides whether to change
    structure, wording, or both. An empty memory omits the memory block.
    """
    if elite.fitness is None:
        raise UsageError("elite individual must have fitness present")
    memory_block = ""
    if not memory.is_empty:
        memory_block = render(MEMORY_BLOCK_TEMPLATE, {"long_term_memory": memory.memory_text})
    user_text = render(
        templates.elitist_mutation,
        {
            "task_description": task.description,
            "elite_prompt": elite.text,
            "elite_score": _fmt(elite.fitness),
            "memory_block": memory_block,
        },
    )
    response = _complete_nonempty(gateway, templates, user_text, "mutate", temperature)
    mutant = PromptIndividual(
        id=mutant_id,
        text=response.text.strip(),
        origin="elitist_mutation",
        parent_ids=(elite.id,),
        epoch_created=epoch,
    )
    if mutant.text == elite.text:
        mutant = mutant.with_flag(FLAG_IDENTICAL_TO_PARENT)
    return mutant


def baseline_offspring(
    pair: ParentPair,
    task: TaskSpec,
    gateway: Gateway,
    templates: OperatorTemplates,
    offspring_id: int,
    epoch: int,
    temperature: float = 0.7,
) -> PromptIndividual:
    """Plain-GA offspring: reflection-free crossover, then a generic mutation."""
    cross_text = render(
        templates.baseline_crossover,
        {
            "task_description": task.description,
            "parent_a": pair.better.text,
            "parent_b": pair.worse.text,
        },
    )
    crossed = _complete_nonempty(gateway, templates, cross_text, "crossover", temperature)
    mutate_text = render(
        templates.baseline_mutation,
        {
            "task_description": task.description,
            "seed_prompt": crossed.text.strip(),
        },
    )
    mutated = _complete_nonempty(gateway, templates, mutate_text, "mutate", temperature)
    child = PromptIndividual(
        id=offspring_id,
        text=mutated.text.strip(),
        origin="baseline_op",
        parent_ids=pair.ids,
        epoch_created=epoch,
    )
    if child.text in (pair.better.text, pair.worse.text):
        child = child.with_flag(FLAG_IDENTICAL_TO_PARENT)
    return child


def _fmt(score: float | None) -> str:
    return f"{score:.4f}" if score is not None else "unknown"
