"""Domain types shared by every module, plus the pure selection-math helpers.

Selection math is kept dependency-free: population vectors are tiny (tens of
entries), so plain ``math``/``bisect`` beats pulling in an array library and
keeps draws bit-reproducible across platforms.
"""

from __future__ import annotations

import bisect
import math
import random
from dataclasses import dataclass, field, replace

from .errors import UsageError, ValidationError

ORIGINS = ("seed", "paraphrase", "crossover", "elitist_mutation", "baseline_op")

METRIC_MACRO_F1 = "macro_f1"
METRIC_METEOR = "meteor"
METRICS = (METRIC_MACRO_F1, METRIC_METEOR)


@dataclass(frozen=True)
class PromptIndividual:
    """A candidate prompt with cached fitness and lineage.

    ``flags`` records advisory lineage notes such as an offspring being
    textually identical to one of its parents; it never affects selection.
    """

    id: int
    text: str
    fitness: float | None = None
    origin: str = "seed"
    parent_ids: tuple[int, ...] = ()
    epoch_created: int = 0
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValidationError("prompt text must be non-empty after trimming")
        if self.fitness is not None and not (0.0 <= self.fitness <= 1.0):
            raise ValidationError(f"fitness {self.fitness!r} outside [0, 1]")
        if self.origin not in ORIGINS:
            raise ValidationError(f"unknown origin {self.origin!r}")
        if self.origin == "crossover" and len(self.parent_ids) != 2:
            raise ValidationError("crossover offspring needs exactly 2 parent ids")
        if self.origin == "elitist_mutation" and len(self.parent_ids) != 1:
            raise ValidationError("elitist mutant needs exactly 1 parent id")
        if self.epoch_created < 0:
            raise ValidationError("epoch_created must be non-negative")

    def with_fitness(self, value: float) -> "PromptIndividual":
        return replace(self, fitness=value)

    def with_flag(self, flag: str) -> "PromptIndividual":
        return replace(self, flags=self.flags + (flag,))


@dataclass(frozen=True)
class EliteRecord:
    """Best-so-far marker kept on the population (id + fitness only)."""

    individual_id: int
    fitness: float


@dataclass
class Population:
    """Generation-indexed list of individuals with an elite record."""

    individuals: list[PromptIndividual]
    generation: int = 0
    elite: EliteRecord | None = None

    def __post_init__(self):
        ids = [ind.id for ind in self.individuals]
        if len(ids) != len(set(ids)):
            raise ValidationError("duplicate individual ids in population")
        if self.generation < 0:
            raise ValidationError("generation must be non-negative")

    def __len__(self) -> int:
        return len(self.individuals)

    def by_id(self, individual_id: int) -> PromptIndividual:
        for ind in self.individuals:
            if ind.id == individual_id:
                return ind
        raise UsageError(f"no individual with id {individual_id}")


@dataclass(frozen=True)
class ParentPair:
    """Two parents with strictly different fitness, better first.

    ``constraint_relaxed`` marks pairs where the distinct-fitness rule had to
    be abandoned (e.g. every individual scores the same) and two distinct
    random members were taken instead.
    """

    better: PromptIndividual
    worse: PromptIndividual
    constraint_relaxed: bool = False

    def __post_init__(self):
        if self.better.fitness is None or self.worse.fitness is None:
            raise ValidationError("both pair members need fitness present")
        if not self.constraint_relaxed and not (self.better.fitness > self.worse.fitness):
            raise ValidationError(
                "pair members must have strictly different fitness with better first"
            )

    @property
    def ids(self) -> tuple[int, int]:
        return (self.better.id, self.worse.id)


@dataclass(frozen=True)
class ShortTermReflection:
    """Hint text contrasting one parent pair, produced once per crossover."""

    hint_text: str
    pair_ids: tuple[int, int]
    epoch: int

    def __post_init__(self):
        if not self.hint_text.strip():
            raise ValidationError("reflection hint must be non-empty")


@dataclass(frozen=True)
class LongTermMemory:
    """Accumulated cross-epoch hint knowledge steering elitist mutation."""

    memory_text: str = ""
    last_updated_epoch: int = -1
    update_count: int = 0

    def __post_init__(self):
        if self.update_count < 0:
            raise ValidationError("update_count must be non-negative")

    @property
    def is_empty(self) -> bool:
        return not self.memory_text.strip()


@dataclass(frozen=True)
class LabelDef:
    """One classification label; the name always counts as an alias."""

    name: str
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name.strip():
            raise ValidationError("label name must be non-empty")

    @property
    def all_aliases(self) -> tuple[str, ...]:
        seen = {self.name.lower(): self.name}
        for alias in self.aliases:
            seen.setdefault(alias.lower(), alias)
        return tuple(seen.values())


@dataclass(frozen=True)
class TaskSpec:
    """What the evolution optimizes: task statement, metric, and data splits."""

    description: str
    metric: str
    label_set: tuple[LabelDef, ...] = ()
    fitness_dataset: str = ""
    holdout_dataset: str = ""

    def __post_init__(self):
        if not self.description.strip():
            raise ValidationError("task description must be non-empty")
        if self.metric not in METRICS:
            raise ValidationError(f"unknown metric {self.metric!r}")
        if self.metric == METRIC_MACRO_F1:
            if not self.label_set:
                raise ValidationError("macro_f1 tasks require a label set")
            seen: set[str] = set()
            for label in self.label_set:
                for alias in label.all_aliases:
                    key = alias.lower()
                    if key in seen:
                        raise ValidationError(f"alias {alias!r} is shared by two labels")
                    seen.add(key)

    @property
    def label_names(self) -> tuple[str, ...]:
        return tuple(label.name for label in self.label_set)


@dataclass(frozen=True)
class EvolutionConfig:
    """Run-shaping knobs; every numeric bound is enforced at construction."""

    population_size: int = 10
    epochs: int = 10
    pairs_per_epoch: int | None = None
    survival_temperature: float = 0.1
    rng_seed: int = 1234
    max_llm_calls: int = 10_000
    eval_subsample_size: int = 50
    operator_temperature: float = 0.7
    parallelism: int = 1
    memory_char_cap: int = 4000
    memory_in_crossover: bool = False

    def __post_init__(self):
        if self.population_size < 2:
            raise ValidationError("population_size must be >= 2")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.pairs_per_epoch is not None and self.pairs_per_epoch < 1:
            raise ValidationError("pairs_per_epoch must be >= 1")
        if not (self.survival_temperature > 0):
            raise ValidationError("survival_temperature must be > 0")
        if not (-(2**63) <= self.rng_seed < 2**64):
            raise ValidationError("rng_seed must fit in 64 bits")
        if self.max_llm_calls < 0:
            raise ValidationError("max_llm_calls must be >= 0")
        if self.eval_subsample_size < 1:
            raise ValidationError("eval_subsample_size must be >= 1")
        if self.operator_temperature < 0:
            raise ValidationError("operator_temperature must be >= 0")
        if self.parallelism < 1:
            raise ValidationError("parallelism must be >= 1")
        if self.memory_char_cap < 1:
            raise ValidationError("memory_char_cap must be >= 1")

    @property
    def pairs(self) -> int:
        """K: pairs per epoch, defaulting to N/2 rounded up."""
        if self.pairs_per_epoch is not None:
            return self.pairs_per_epoch
        return math.ceil(self.population_size / 2)


class IdAllocator:
    """Monotonic integer ids; deterministic and checkpoint-friendly."""

    def __init__(self, next_id: int = 0):
        self._next = next_id

    def allocate(self) -> int:
        value = self._next
        self._next += 1
        return value

    @property
    def next_id(self) -> int:
        return self._next


def normalize_weights(scores: list[float]) -> list[float]:
    """Turn non-negative scores into roulette probabilities.

    An all-zero vector falls back to uniform so cold-start populations
    (every prompt scoring 0) can still be selected from.
    """
    if not scores:
        raise UsageError("normalize_weights needs at least one score")
    for s in scores:
        if not math.isfinite(s) or s < 0:
            raise ValidationError(f"score {s!r} must be finite and non-negative")
    total = sum(scores)
    if total <= 0.0:
        return [1.0 / len(scores)] * len(scores)
    return [s / total for s in scores]


def tempered_softmax(scores: list[float], temperature: float) -> list[float]:
    """Softmax of scores/temperature with max-subtraction for stability."""
    if not scores:
        raise UsageError("tempered_softmax needs at least one score")
    if not (temperature > 0):
        raise ValidationError("temperature must be > 0")
    for s in scores:
        if not math.isfinite(s):
            raise ValidationError(f"score {s!r} must be finite")
    peak = max(scores)
    exps = [math.exp((s - peak) / temperature) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


def weighted_draw(probabilities: list[float], count: int, rng: random.Random) -> list[int]:
    """Sample ``count`` indices i.i.d. from a probability vector.

    The generator is single-owner: callers must not share ``rng`` across
    concurrent call sites or draws stop being reproducible.
    """
    if count < 1:
        raise UsageError("count must be >= 1")
    if not probabilities:
        raise ValidationError("probability vector is empty")
    for p in probabilities:
        if not math.isfinite(p) or p < 0:
            raise ValidationError(f"probability {p!r} must be finite and non-negative")
    if abs(sum(probabilities) - 1.0) > 1e-9:
        raise ValidationError(f"probabilities sum to {sum(probabilities)!r}, not 1")

    cumulative = []
    acc = 0.0
    for p in probabilities:
        acc += p
        cumulative.append(acc)
    last = len(probabilities) - 1

    draws = []
    for _ in range(count):
        r = rng.random()
        idx = bisect.bisect_right(cumulative, r)
        draws.append(min(idx, last))
    return draws


def rng_state_to_json(rng: random.Random) -> list:
    """random.Random state as a JSON-friendly structure."""
    version, internal, gauss_next = rng.getstate()
    return [version, list(internal), gauss_next]


def rng_state_from_json(state: list) -> random.Random:
    rng = random.Random()
    version, internal, gauss_next = state
    rng.setstate((version, tuple(internal), gauss_next))
    return rng
