"""The per-epoch evolution pipeline and full-run orchestration.

Epoch order: elite reinsertion, roulette parent pairing, short-term
reflection, hint-guided crossover, long-term reflection, elitist mutation,
evaluation of the new individuals, softmax survival selection, elite
update, history record. The baseline mode keeps the same selection,
elitism, and evaluation machinery but swaps the reflective operators for
plain crossover-then-mutate calls.

All randomized decisions draw from the single run RNG on the sequential
control path, so operator/evaluation parallelism never changes which
random numbers are drawn.
"""

from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from . import data_io, operators
from .core import (
    EliteRecord,
    EvolutionConfig,
    IdAllocator,
    LabelDef,
    LongTermMemory,
    ParentPair,
    Population,
    PromptIndividual,
    TaskSpec,
    normalize_weights,
    rng_state_from_json,
    rng_state_to_json,
    tempered_softmax,
    weighted_draw,
)
from .errors import BudgetExhaustedError, UsageError
from .evaluation import EvalSample, FitnessCache, evaluate_prompt
from .gateway import Gateway
from .templates import OperatorTemplates, load_templates

logger = logging.getLogger(__name__)

PAIRING_ATTEMPT_CAP = 20


@dataclass
class EpochRecord:
    epoch: int
    best_fitness: float
    mean_fitness: float
    new_individual_ids: list[int]
    completed: bool = True

    def to_doc(self) -> dict:
        return asdict(self)


@dataclass
class RunState:
    """Full resumable snapshot of an optimization run."""

    config: EvolutionConfig
    task: TaskSpec
    seed_prompt: str
    population: Population
    memory: LongTermMemory
    epoch: int
    rng: random.Random
    history: list[EpochRecord]
    ids: IdAllocator
    cache: FitnessCache
    elite_individual: PromptIndividual | None = None
    ledger_used: dict[str, int] = field(default_factory=dict)
    baseline_mode: bool = False
    terminated: bool = False
    termination_reason: str | None = None
    aborted_epoch: dict | None = None

    def to_doc(self) -> dict:
        return {
            "config": asdict(self.config),
            "task": {
                "description": self.task.description,
                "metric": self.task.metric,
                "label_set": [
                    {"name": label.name, "aliases": list(label.aliases)}
                    for label in self.task.label_set
                ],
                "fitness_dataset": self.task.fitness_dataset,
                "holdout_dataset": self.task.holdout_dataset,
            },
            "seed_prompt": self.seed_prompt,
            "population": {
                "generation": self.population.generation,
                "elite": asdict(self.population.elite) if self.population.elite else None,
                "individuals": [_individual_to_doc(ind) for ind in self.population.individuals],
            },
            "memory": asdict(self.memory),
            "epoch": self.epoch,
            "rng_state": rng_state_to_json(self.rng),
            "history": [record.to_doc() for record in self.history],
            "next_id": self.ids.next_id,
            "cache": self.cache.to_doc(),
            "elite_individual": (
                _individual_to_doc(self.elite_individual) if self.elite_individual else None
            ),
            "ledger_used": dict(self.ledger_used),
            "baseline_mode": self.baseline_mode,
            "terminated": self.terminated,
            "termination_reason": self.termination_reason,
            "aborted_epoch": self.aborted_epoch,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "RunState":
        task_doc = doc["task"]
        task = TaskSpec(
            description=task_doc["description"],
            metric=task_doc["metric"],
            label_set=tuple(
                LabelDef(name=l["name"], aliases=tuple(l["aliases"]))
                for l in task_doc["label_set"]
            ),
            fitness_dataset=task_doc["fitness_dataset"],
            holdout_dataset=task_doc["holdout_dataset"],
        )
        pop_doc = doc["population"]
        population = Population(
            individuals=[_individual_from_doc(d) for d in pop_doc["individuals"]],
            generation=pop_doc["generation"],
            elite=EliteRecord(**pop_doc["elite"]) if pop_doc["elite"] else None,
        )
        return cls(
            config=EvolutionConfig(**doc["config"]),
            task=task,
            seed_prompt=doc["seed_prompt"],
            population=population,
            memory=LongTermMemory(**doc["memory"]),
            epoch=doc["epoch"],
            rng=rng_state_from_json(doc["rng_state"]),
            history=[EpochRecord(**record) for record in doc["history"]],
            ids=IdAllocator(doc["next_id"]),
            cache=FitnessCache.from_doc(doc["cache"]),
            elite_individual=(
                _individual_from_doc(doc["elite_individual"])
                if doc["elite_individual"]
                else None
            ),
            ledger_used=dict(doc["ledger_used"]),
            baseline_mode=doc["baseline_mode"],
            terminated=doc["terminated"],
            termination_reason=doc["termination_reason"],
            aborted_epoch=doc["aborted_epoch"],
        )


def _individual_to_doc(ind: PromptIndividual) -> dict:
    return {
        "id": ind.id,
        "text": ind.text,
        "fitness": ind.fitness,
        "origin": ind.origin,
        "parent_ids": list(ind.parent_ids),
        "epoch_created": ind.epoch_created,
        "flags": list(ind.flags),
    }


def _individual_from_doc(doc: dict) -> PromptIndividual:
    return PromptIndividual(
        id=doc["id"],
        text=doc["text"],
        fitness=doc["fitness"],
        origin=doc["origin"],
        parent_ids=tuple(doc["parent_ids"]),
        epoch_created=doc["epoch_created"],
        flags=tuple(doc["flags"]),
    )


@dataclass
class RunReport:
    """Deterministic run summary: no timestamps, no filesystem paths."""

    best_prompt: str | None
    best_fitness: float | None
    holdout_fitness: float | None
    history: list[EpochRecord]
    calls_per_purpose: dict[str, int]
    total_calls: int
    epochs_completed: int
    epochs_configured: int
    metric: str
    population_size: int
    baseline_mode: bool
    terminated: bool
    termination_reason: str | None
    seed_prompt: str

    def to_doc(self) -> dict:
        return {
            "best_prompt": self.best_prompt,
            "best_fitness": self.best_fitness,
            "holdout_fitness": self.holdout_fitness,
            "history": [record.to_doc() for record in self.history],
            "calls_per_purpose": dict(sorted(self.calls_per_purpose.items())),
            "total_calls": self.total_calls,
            "epochs_completed": self.epochs_completed,
            "epochs_configured": self.epochs_configured,
            "metric": self.metric,
            "population_size": self.population_size,
            "baseline_mode": self.baseline_mode,
            "terminated": self.terminated,
            "termination_reason": self.termination_reason,
            "seed_prompt": self.seed_prompt,
        }


def _map_ordered(fn, items, parallelism: int) -> list:
    items = list(items)
    if parallelism <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def select_parent_pairs(population: Population, k: int, rng: random.Random) -> list[ParentPair]:
    """Roulette-wheel pairing over normalized fitness.

    Draws for a pair repeat until the two members have different fitness,
    capped at PAIRING_ATTEMPT_CAP attempts; hitting the cap falls back to
    two distinct random members flagged constraint_relaxed.
    """
    individuals = population.individuals
    if len(individuals) < 2:
        raise UsageError("parent selection needs at least 2 individuals")
    if any(ind.fitness is None for ind in individuals):
        raise UsageError("parent selection needs fitness on every individual")
    fitnesses = [ind.fitness for ind in individuals]
    probabilities = normalize_weights(fitnesses)

    pairs: list[ParentPair] = []
    for _ in range(k):
        chosen: tuple[int, int] | None = None
        for _attempt in range(PAIRING_ATTEMPT_CAP):
            i, j = weighted_draw(probabilities, 2, rng)
            if fitnesses[i] != fitnesses[j]:
                chosen = (i, j)
                break
        if chosen is None:
            i, j = rng.sample(range(len(individuals)), 2)
            a, b = individuals[i], individuals[j]
            better, worse = (a, b) if a.fitness >= b.fitness else (b, a)
            pairs.append(ParentPair(better=better, worse=worse, constraint_relaxed=True))
        else:
            a, b = individuals[chosen[0]], individuals[chosen[1]]
            better, worse = (a, b) if a.fitness > b.fitness else (b, a)
            pairs.append(ParentPair(better=better, worse=worse))
    return pairs


def survival_select(
    candidates: list[PromptIndividual],
    n: int,
    temperature: float,
    rng: random.Random,
) -> list[PromptIndividual]:
    """Sample n survivors without replacement via tempered-softmax roulette."""
    if n < 1:
        raise UsageError("survival selection needs n >= 1")
    if len(candidates) < n:
        raise UsageError(f"cannot select {n} survivors from {len(candidates)} candidates")
    if any(ind.fitness is None for ind in candidates):
        raise UsageError("survival selection needs fitness on every candidate")

    remaining = list(candidates)
    survivors: list[PromptIndividual] = []
    for _ in range(n):
        probabilities = tempered_softmax([ind.fitness for ind in remaining], temperature)
        index = weighted_draw(probabilities, 1, rng)[0]
        survivors.append(remaining.pop(index))
    return survivors


def reinsert_elite(population: Population, elite: PromptIndividual | None) -> Population:
    """Put the best-so-far individual back, replacing the worst member.

    No-op when a member already carries the elite's prompt text. Ties for
    worst break toward the lower id. Population size never changes.
    """
    if elite is None:
        return population
    if any(ind.text == elite.text for ind in population.individuals):
        return population
    worst = min(
        population.individuals,
        key=lambda ind: (ind.fitness if ind.fitness is not None else -1.0, ind.id),
    )
    individuals = [elite if ind.id == worst.id else ind for ind in population.individuals]
    return Population(
        individuals=individuals,
        generation=population.generation,
        elite=EliteRecord(individual_id=elite.id, fitness=elite.fitness),
    )


class EvolutionRun:
    """Wires one run together: state, gateway, datasets, checkpointing."""

    def __init__(
        self,
        state: RunState,
        gateway: Gateway,
        templates: OperatorTemplates,
        fitness_samples: list[EvalSample],
        holdout_samples: list[EvalSample] | None = None,
        checkpoint_path: str | None = None,
        audit_path: str | None = None,
    ):
        self.state = state
        self.gateway = gateway
        self.templates = templates
        self.fitness_samples = fitness_samples
        self.holdout_samples = holdout_samples
        self.checkpoint_path = checkpoint_path
        self.audit_path = audit_path

    # -- pieces ---------------------------------------------------------

    def _evaluate(self, text: str) -> float:
        score = evaluate_prompt(
            text,
            self.state.task,
            self.fitness_samples,
            self.gateway,
            cache=self.state.cache,
            audit_path=self.audit_path,
            parallelism=self.state.config.parallelism,
        )
        return score.value

    def _consider_elite(self, candidates: list[PromptIndividual]) -> None:
        state = self.state
        for ind in candidates:
            if ind.fitness is None:
                continue
            if state.elite_individual is None or ind.fitness > state.elite_individual.fitness:
                state.elite_individual = ind

    def _checkpoint(self) -> None:
        self.state.ledger_used = self.gateway.ledger.snapshot()
        if self.checkpoint_path:
            data_io.save_checkpoint(self.state, self.checkpoint_path)

    def _record_termination(self, reason: str, stage: str | None = None) -> None:
        state = self.state
        state.terminated = True
        state.termination_reason = reason
        if stage is not None:
            state.aborted_epoch = {"epoch": state.epoch + 1, "stage": stage}
        logger.warning("run terminated: %s (stage=%s)", reason, stage)

    # -- pipeline -------------------------------------------------------

    def initialize(self) -> None:
        """Build epoch-0 population: seed + N-1 paraphrases, all evaluated."""
        state = self.state
        config = state.config
        self.gateway.current_epoch = 0
        members: list[PromptIndividual] = []
        stage = "seed_evaluation"
        try:
            seed = PromptIndividual(
                id=state.ids.allocate(),
                text=state.seed_prompt.strip(),
                origin="seed",
                epoch_created=0,
            )
            seed = seed.with_fitness(self._evaluate(seed.text))
            members.append(seed)
            self._consider_elite([seed])

            stage = "paraphrase"
            variants = operators.paraphrase_seed(
                seed.text,
                config.population_size - 1,
                self.gateway,
                self.templates,
                temperature=config.operator_temperature,
            )
            stage = "paraphrase_evaluation"
            for text in variants:
                individual = PromptIndividual(
                    id=state.ids.allocate(),
                    text=text,
                    origin="paraphrase",
                    parent_ids=(seed.id,),
                    epoch_created=0,
                )
                individual = individual.with_fitness(self._evaluate(individual.text))
                members.append(individual)
                self._consider_elite([individual])
        except BudgetExhaustedError:
            self._record_termination("budget exhausted during initialization", stage)

        self._finish_population(members, generation=0)
        self._checkpoint()

    def _finish_population(self, members: list[PromptIndividual], generation: int) -> None:
        state = self.state
        elite = state.elite_individual
        state.population = Population(
            individuals=list(members),
            generation=generation,
            elite=EliteRecord(elite.id, elite.fitness) if elite else None,
        )

    def run_epoch(self) -> None:
        """Execute one full epoch; on budget exhaustion, salvage and stop."""
        state = self.state
        config = state.config
        if state.terminated:
            raise UsageError("cannot run an epoch on a terminated state")
        if state.epoch >= config.epochs:
            raise UsageError("configured epochs already completed")

        epoch_index = state.epoch + 1
        self.gateway.current_epoch = epoch_index
        evaluated: list[PromptIndividual] = []
        stage = "elite_reinsertion"
        try:
            state.population = reinsert_elite(state.population, state.elite_individual)

            stage = "parent_selection"
            pairs = select_parent_pairs(state.population, config.pairs, state.rng)

            stage = "short_term_reflection"
            if state.baseline_mode:
                hints = []
            else:
                hints = _map_ordered(
                    lambda pair: operators.short_term_reflect(
                        pair,
                        state.task,
                        self.gateway,
                        self.templates,
                        epoch=epoch_index,
                        temperature=config.operator_temperature,
                    ),
                    pairs,
                    config.parallelism,
                )

            stage = "crossover"
            offspring_ids = [state.ids.allocate() for _ in pairs]
            if state.baseline_mode:
                offspring = _map_ordered(
                    lambda pair_id: operators.baseline_offspring(
                        pair_id[0],
                        state.task,
                        self.gateway,
                        self.templates,
                        offspring_id=pair_id[1],
                        epoch=epoch_index,
                        temperature=config.operator_temperature,
                    ),
                    zip(pairs, offspring_ids),
                    config.parallelism,
                )
            else:
                offspring = _map_ordered(
                    lambda pair_hint_id: operators.crossover(
                        pair_hint_id[0],
                        pair_hint_id[1],
                        state.task,
                        self.gateway,
                        self.templates,
                        offspring_id=pair_hint_id[2],
                        epoch=epoch_index,
                        temperature=config.operator_temperature,
                        memory=state.memory if config.memory_in_crossover else None,
                    ),
                    zip(pairs, hints, offspring_ids),
                    config.parallelism,
                )

            new_individuals = list(offspring)
            if not state.baseline_mode:
                stage = "long_term_reflection"
                state.memory = operators.long_term_reflect(
                    state.memory,
                    hints,
                    state.task,
                    self.gateway,
                    self.templates,
                    epoch=epoch_index,
                    char_cap=config.memory_char_cap,
                    temperature=config.operator_temperature,
                )

                stage = "elitist_mutation"
                mutant = operators.elitist_mutation(
                    state.elite_individual,
                    state.memory,
                    state.task,
                    self.gateway,
                    self.templates,
                    mutant_id=state.ids.allocate(),
                    epoch=epoch_index,
                    temperature=config.operator_temperature,
                )
                new_individuals.append(mutant)

            stage = "evaluation"
            for individual in new_individuals:
                evaluated.append(individual.with_fitness(self._evaluate(individual.text)))
        except BudgetExhaustedError:
            salvaged = state.population.individuals + evaluated
            self._consider_elite(evaluated)
            self._finish_population(salvaged, generation=state.population.generation)
            self._record_termination("budget exhausted mid-epoch", stage)
            self.state.history.append(
                EpochRecord(
                    epoch=epoch_index,
                    best_fitness=(
                        state.elite_individual.fitness if state.elite_individual else 0.0
                    ),
                    mean_fitness=_mean_fitness(salvaged),
                    new_individual_ids=[ind.id for ind in evaluated],
                    completed=False,
                )
            )
            self._checkpoint()
            return

        pool = state.population.individuals + evaluated
        survivors = survival_select(
            pool, config.population_size, config.survival_temperature, state.rng
        )
        self._consider_elite(evaluated)
        self._finish_population(survivors, generation=epoch_index)
        state.epoch = epoch_index
        state.history.append(
            EpochRecord(
                epoch=epoch_index,
                best_fitness=state.elite_individual.fitness,
                mean_fitness=_mean_fitness(survivors),
                new_individual_ids=[ind.id for ind in evaluated],
            )
        )
        self._checkpoint()

    def finalize(self) -> RunReport:
        """Measure the holdout split and assemble the report."""
        state = self.state
        holdout_fitness = None
        best = state.elite_individual
        if best is not None and self.holdout_samples:
            try:
                score = evaluate_prompt(
                    best.text,
                    state.task,
                    self.holdout_samples,
                    self.gateway,
                    cache=state.cache,
                    audit_path=self.audit_path,
                    parallelism=state.config.parallelism,
                )
                holdout_fitness = score.value
            except BudgetExhaustedError:
                if not state.terminated:
                    self._record_termination("budget exhausted during holdout evaluation")
        self._checkpoint()
        ledger = self.gateway.ledger
        return RunReport(
            best_prompt=best.text if best else None,
            best_fitness=best.fitness if best else None,
            holdout_fitness=holdout_fitness,
            history=list(state.history),
            calls_per_purpose=ledger.snapshot(),
            total_calls=ledger.total_used,
            epochs_completed=state.epoch,
            epochs_configured=state.config.epochs,
            metric=state.task.metric,
            population_size=state.config.population_size,
            baseline_mode=state.baseline_mode,
            terminated=state.terminated,
            termination_reason=state.termination_reason,
            seed_prompt=state.seed_prompt,
        )

    def run_to_completion(self) -> RunReport:
        while not self.state.terminated and self.state.epoch < self.state.config.epochs:
            self.run_epoch()
        return self.finalize()


def _mean_fitness(individuals: list[PromptIndividual]) -> float:
    values = [ind.fitness for ind in individuals if ind.fitness is not None]
    return sum(values) / len(values) if values else 0.0


def init_population(
    seed_prompt: str,
    task: TaskSpec,
    config: EvolutionConfig,
    gateway: Gateway,
    templates: OperatorTemplates | None = None,
    fitness_samples: list[EvalSample] | None = None,
    baseline_mode: bool = False,
) -> RunState:
    """Fresh RunState with the evaluated epoch-0 population."""
    if fitness_samples is None:
        fitness_samples = _load_fitness_samples(task, config)
    state = RunState(
        config=config,
        task=task,
        seed_prompt=seed_prompt,
        population=Population(individuals=[], generation=0),
        memory=LongTermMemory(),
        epoch=0,
        rng=random.Random(config.rng_seed),
        history=[],
        ids=IdAllocator(),
        cache=FitnessCache(),
        baseline_mode=baseline_mode,
    )
    run = EvolutionRun(state, gateway, templates or load_templates(), fitness_samples)
    run.initialize()
    return state


def _load_fitness_samples(task: TaskSpec, config: EvolutionConfig) -> list[EvalSample]:
    samples = data_io.load_dataset(task.fitness_dataset)
    return data_io.subsample(samples, config.eval_subsample_size, config.rng_seed)


def _load_holdout_samples(task: TaskSpec) -> list[EvalSample] | None:
    if not task.holdout_dataset:
        return None
    return data_io.load_dataset(task.holdout_dataset)


def run(
    seed_prompt: str,
    task: TaskSpec,
    config: EvolutionConfig,
    gateway: Gateway,
    templates: OperatorTemplates | None = None,
    run_dir: str | None = None,
    baseline: bool = False,
    fitness_samples: list[EvalSample] | None = None,
    holdout_samples: list[EvalSample] | None = None,
) -> RunReport:
    """Full optimization: init, epochs until done or budget stop, report."""
    from . import reporting

    templates = templates or load_templates()
    if fitness_samples is None:
        fitness_samples = _load_fitness_samples(task, config)
    if holdout_samples is None:
        holdout_samples = _load_holdout_samples(task)

    state = RunState(
        config=config,
        task=task,
        seed_prompt=seed_prompt,
        population=Population(individuals=[], generation=0),
        memory=LongTermMemory(),
        epoch=0,
        rng=random.Random(config.rng_seed),
        history=[],
        ids=IdAllocator(),
        cache=FitnessCache(),
        baseline_mode=baseline,
    )
    evolution = EvolutionRun(
        state,
        gateway,
        templates,
        fitness_samples,
        holdout_samples=holdout_samples,
        checkpoint_path=f"{run_dir}/checkpoint.json" if run_dir else None,
        audit_path=f"{run_dir}/audit.jsonl" if run_dir else None,
    )
    evolution.initialize()
    report = evolution.run_to_completion()
    if run_dir:
        reporting.write_report(run_dir, report)
    return report


def run_baseline_ga(
    seed_prompt: str,
    task: TaskSpec,
    config: EvolutionConfig,
    gateway: Gateway,
    templates: OperatorTemplates | None = None,
    run_dir: str | None = None,
    fitness_samples: list[EvalSample] | None = None,
    holdout_samples: list[EvalSample] | None = None,
) -> RunReport:
    """Plain-GA comparator: no reflections, no memory, generic operators."""
    return run(
        seed_prompt,
        task,
        config,
        gateway,
        templates=templates,
        run_dir=run_dir,
        baseline=True,
        fitness_samples=fitness_samples,
        holdout_samples=holdout_samples,
    )


def resume(
    checkpoint_path: str,
    gateway: Gateway,
    templates: OperatorTemplates | None = None,
    run_dir: str | None = None,
    fitness_samples: list[EvalSample] | None = None,
    holdout_samples: list[EvalSample] | None = None,
) -> RunReport:
    """Continue a checkpointed run to its configured epoch count.

    The gateway's ledger is replaced with one restored from the checkpoint
    so budget accounting continues where the interrupted run stopped.
    """
    from . import reporting
    from .gateway import BudgetLedger

    state = data_io.load_checkpoint(checkpoint_path)
    gateway.ledger = BudgetLedger(state.config.max_llm_calls, calls_used=state.ledger_used)
    templates = templates or load_templates()
    if fitness_samples is None:
        fitness_samples = _load_fitness_samples(state.task, state.config)
    if holdout_samples is None:
        holdout_samples = _load_holdout_samples(state.task)

    evolution = EvolutionRun(
        state,
        gateway,
        templates,
        fitness_samples,
        holdout_samples=holdout_samples,
        checkpoint_path=f"{run_dir}/checkpoint.json" if run_dir else checkpoint_path,
        audit_path=f"{run_dir}/audit.jsonl" if run_dir else None,
    )
    report = evolution.run_to_completion()
    if run_dir:
        reporting.write_report(run_dir, report)
    return report
