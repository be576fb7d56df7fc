"""Budget-preserving evolutionary search over stage-wise sparsity schedules.

A schedule assigns an integer sparsity level in ``[0, l_max]`` to each of
``n`` stages, and every schedule in a run sums to the same budget
``n * target_level``. The only variation operator is the level-switch
mutation, which moves ``delta`` levels from one stage to another.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_schedule
from .exceptions import InvalidConfig

logger = logging.getLogger(__name__)

Fitness = Callable[[Sequence[int]], float]
INIT_MODES = ("uniform", "random", "patterned", "mixed")
MAX_MUTATION_ATTEMPTS = 100


@dataclass(frozen=True)
class SearchConfig:
    n_stages: int = 10
    l_max: int = 16
    target_level: int = 8
    population_size: int = 20
    offspring: int = 16
    survivors: int = 4
    generations: int = 100
    max_mutation: int | None = None  # defaults to ~30% of l_max
    init: str = "mixed"
    seed: int = 0

    def __post_init__(self):
        if self.n_stages < 1 or self.l_max < 1:
            raise InvalidConfig("need n_stages >= 1 and l_max >= 1")
        if not 0 <= self.target_level <= self.l_max:
            raise InvalidConfig(f"target level {self.target_level} outside [0, {self.l_max}]")
        if self.offspring + self.survivors != self.population_size:
            raise InvalidConfig("offspring + survivors must equal population_size")
        if self.survivors < 1 or self.offspring < 0 or self.generations < 0:
            raise InvalidConfig("need survivors >= 1, offspring >= 0, generations >= 0")
        if not 1 <= self.mutation_magnitude <= self.l_max:
            raise InvalidConfig(f"max_mutation must be in [1, {self.l_max}]")
        if self.init not in INIT_MODES:
            raise InvalidConfig(f"init must be one of {INIT_MODES}")

    @property
    def budget(self) -> int:
        return self.n_stages * self.target_level

    @property
    def mutation_magnitude(self) -> int:
        if self.max_mutation is not None:
            return self.max_mutation
        return max(1, round(0.3 * self.l_max))

    @property
    def evaluation_budget(self) -> int:
        """Individuals evaluated by one evolutionary run."""
        return self.population_size + self.offspring * self.generations


_ids = itertools.count()


@dataclass
class Individual:
    schedule: tuple[int, ...]
    fitness: float | None = None
    parent: int | None = None
    generation: int = 0
    stuck: bool = False
    uid: int = field(default_factory=lambda: next(_ids))

    def __hash__(self) -> int:
        return hash(self.schedule)

    def __eq__(self, other) -> bool:
        return isinstance(other, Individual) and self.schedule == other.schedule


def global_sparsity(schedule: Sequence[int], l_max: int) -> float:
    """Fraction of structures removed averaged over equally long stages."""
    return float(np.mean(schedule)) / l_max


def uniform_schedule(n_stages: int, budget: int, l_max: int) -> tuple[int, ...]:
    if not 0 <= budget <= n_stages * l_max:
        raise InvalidConfig(f"budget {budget} infeasible for {n_stages} stages with l_max {l_max}")
    base, extra = divmod(budget, n_stages)
    return tuple(base + (1 if i < extra else 0) for i in range(n_stages))


def compose(weights: Sequence[float], budget: int, l_max: int) -> tuple[int, ...]:
    """Integer schedule proportional to ``weights`` with exact sum and bounds.

    Shares are capped at ``l_max`` and rounded down; the leftover levels go
    one at a time to the largest remainders among stages with headroom.
    """
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    n = len(w)
    if not 0 <= budget <= n * l_max:
        raise InvalidConfig(f"budget {budget} infeasible for {n} stages with l_max {l_max}")
    if w.sum() == 0:
        return uniform_schedule(n, budget, l_max)
    raw = np.minimum(w / w.sum() * budget, l_max)
    levels = np.floor(raw).astype(int)
    remainder = raw - levels
    while levels.sum() < budget:
        room = np.where(levels < l_max, remainder + 1e-9 * (l_max - levels), -np.inf)
        i = int(np.argmax(room))
        levels[i] += 1
        remainder[i] = -1.0
    return tuple(int(v) for v in levels)


def patterned_schedules(n_stages: int, budget: int, l_max: int) -> list[tuple[int, ...]]:
    """Ramp-up, ramp-down, middle-heavy and edge-heavy shapes at the given budget."""
    x = np.linspace(0.0, 1.0, n_stages)
    shapes = [
        0.25 + x,
        1.25 - x,
        0.25 + 1.0 - np.abs(2 * x - 1),
        0.25 + np.abs(2 * x - 1),
    ]
    return [compose(s, budget, l_max) for s in shapes]


def mutate(
    ind: Individual,
    rng: np.random.Generator,
    max_mutation: int,
    l_max: int,
    *,
    generation: int | None = None,
    force: tuple[int, int, int] | None = None,
) -> Individual:
    """Level switch: ``L_i += delta``, ``L_j -= delta`` for random ``i != j``.

    ``delta`` is uniform on ``[1, max_mutation]``. Draws that break the bounds
    are redrawn up to 100 times; after that the parent's schedule is returned
    with ``stuck=True``. ``force=(i, j, delta)`` applies one fixed switch.
    """
    levels = list(ind.schedule)
    n = len(levels)
    gen = ind.generation + 1 if generation is None else generation
    if force is not None:
        candidates = [force]
    elif n >= 2:
        candidates = _draw_switches(rng, n, max_mutation)
    else:
        candidates = []
    for k, (i, j, delta) in enumerate(candidates):
        if k == 10 and not _has_switch(levels, l_max):
            break
        if levels[i] + delta <= l_max and levels[j] - delta >= 0:
            levels[i] += delta
            levels[j] -= delta
            return Individual(tuple(levels), parent=ind.uid, generation=gen)
    return Individual(ind.schedule, fitness=ind.fitness, parent=ind.uid, generation=gen, stuck=True)


def _has_switch(levels: list[int], l_max: int) -> bool:
    """Whether some unit switch is legal; when none is, every draw would be rejected."""
    up = [k for k, v in enumerate(levels) if v < l_max]
    down = [k for k, v in enumerate(levels) if v > 0]
    return any(i != j for i in up[:2] for j in down[:2])


def _draw_switches(rng: np.random.Generator, n: int, max_mutation: int, chunk: int = 10):
    """Up to ``MAX_MUTATION_ATTEMPTS`` independent (i, j, delta) draws, produced lazily in batches."""
    # one draw per triple, decoded as (i, j', delta) with j' skipping over i
    per_i = (n - 1) * max_mutation
    for _ in range(MAX_MUTATION_ATTEMPTS // chunk):
        for code in rng.integers(0, n * per_i, chunk).tolist():
            i, rest = divmod(code, per_i)
            j, d = divmod(rest, max_mutation)
            yield i, j + (j >= i), d + 1


def init_population(cfg: SearchConfig, rng: np.random.Generator, mode: str | None = None) -> list[Individual]:
    """Initial schedules, all at the configured budget.

    ``mixed`` (the search default) seeds the uniform schedule first, then the
    patterned shapes, then random schedules until the population is full.
    """
    mode = mode or cfg.init
    n, B, L = cfg.n_stages, cfg.budget, cfg.l_max
    uni = uniform_schedule(n, B, L)
    size = cfg.population_size

    def random_one() -> tuple[int, ...]:
        ind = Individual(uni)
        for _ in range(4 * n):
            ind = mutate(ind, rng, cfg.mutation_magnitude, L, generation=0)
            if ind.stuck:  # no legal switch from here, e.g. budget 0 or n * l_max
                break
        return ind.schedule

    if mode == "uniform":
        schedules = [uni] * size
    elif mode == "random":
        schedules = [random_one() for _ in range(size)]
    elif mode == "patterned":
        pats = patterned_schedules(n, B, L)
        schedules = [pats[i % len(pats)] for i in range(size)]
    elif mode == "mixed":
        schedules = [uni]
        for p in patterned_schedules(n, B, L):
            if p not in schedules and len(schedules) < size:
                schedules.append(p)
        tries = 0
        while len(schedules) < size:
            s = random_one()
            tries += 1
            if s not in schedules or tries > 5 * size:
                schedules.append(s)
    else:
        raise InvalidConfig(f"unknown init mode {mode!r}")
    return [Individual(check_schedule(s, n, L, B), generation=0) for s in schedules]


def evaluate(ind: Individual, fitness: Fitness) -> float:
    if ind.fitness is None:
        ind.fitness = float(fitness(ind.schedule))
    return ind.fitness


def rank(population: Sequence[Individual]) -> list[Individual]:
    """Best first; equal fitness falls back to the lexicographically smaller schedule."""
    return sorted(population, key=lambda ind: (-ind.fitness, ind.schedule))


def step_generation(
    population: Sequence[Individual],
    cfg: SearchConfig,
    fitness: Fitness,
    rng: np.random.Generator,
    generation: int,
) -> list[Individual]:
    """Keep the top survivors unchanged and add mutated copies of random survivors."""
    if any(ind.fitness is None for ind in population):
        raise InvalidConfig("every individual must be evaluated before selection")
    survivors = rank(population)[: cfg.survivors]
    children = []
    for _ in range(cfg.offspring):
        parent = survivors[int(rng.integers(len(survivors)))]
        child = mutate(parent, rng, cfg.mutation_magnitude, cfg.l_max, generation=generation)
        child.fitness = None
        evaluate(child, fitness)
        children.append(child)
    return list(survivors) + children


@dataclass
class SearchResult:
    best: Individual
    history: list[dict]
    n_evaluations: int
    population: list[Individual] = field(default_factory=list)


def _record(history: list[dict], generation: int, population: Sequence[Individual]) -> None:
    vals = [ind.fitness for ind in population]
    history.append({"generation": generation, "best": max(vals), "mean": float(np.mean(vals))})


def search(cfg: SearchConfig, fitness: Fitness) -> SearchResult:
    """Run the mutation-evaluation-selection loop for ``cfg.generations`` generations."""
    rng = np.random.default_rng(cfg.seed)
    population = init_population(cfg, rng)
    for ind in population:
        evaluate(ind, fitness)
    n_eval = len(population)
    history: list[dict] = []
    _record(history, 0, population)
    for g in range(1, cfg.generations + 1):
        population = step_generation(population, cfg, fitness, rng, g)
        n_eval += cfg.offspring
        _record(history, g, population)
        logger.debug("generation %d best %.6f", g, history[-1]["best"])
    best = rank(population)[0]
    return SearchResult(best=best, history=history, n_evaluations=n_eval, population=list(population))


def greedy_search(cfg: SearchConfig, fitness: Fitness, max_evaluations: int | None = None) -> SearchResult:
    """Best-improvement hill climbing with unit level switches from the uniform schedule.

    Stops when no neighbour improves or when ``max_evaluations`` (default: the
    evolutionary run's evaluation count) is exhausted.
    """
    cap = cfg.evaluation_budget if max_evaluations is None else max_evaluations
    current = Individual(uniform_schedule(cfg.n_stages, cfg.budget, cfg.l_max))
    evaluate(current, fitness)
    n_eval = 1
    history = [{"generation": 0, "best": current.fitness, "mean": current.fitness}]
    n = cfg.n_stages
    step = 0
    while n_eval < cap:
        step += 1
        neighbours = []
        for i, j in itertools.permutations(range(n), 2):
            if n_eval >= cap:
                break
            child = mutate(current, None, 1, cfg.l_max, generation=step, force=(i, j, 1))
            if child.stuck:
                continue
            evaluate(child, fitness)
            n_eval += 1
            neighbours.append(child)
        if not neighbours:
            break
        best = rank(neighbours)[0]
        history.append({"generation": step, "best": max(best.fitness, current.fitness), "mean": float(np.mean([c.fitness for c in neighbours]))})
        if best.fitness <= current.fitness:
            break
        current = best
    return SearchResult(best=current, history=history, n_evaluations=n_eval)


class LevelSwitchSearch(BaseEstimator):
    """Estimator wrapper around :func:`search`.

    ``fit(fitness)`` takes a callable mapping a schedule to a score (higher
    is better) and stores ``best_schedule_``, ``best_fitness_``,
    ``history_`` and ``n_evaluations_``.
    """

    def __init__(
        self,
        n_stages=10,
        l_max=16,
        target_level=8,
        population_size=20,
        offspring=16,
        survivors=4,
        generations=100,
        max_mutation=None,
        init="mixed",
        seed=0,
    ):
        self.n_stages = n_stages
        self.l_max = l_max
        self.target_level = target_level
        self.population_size = population_size
        self.offspring = offspring
        self.survivors = survivors
        self.generations = generations
        self.max_mutation = max_mutation
        self.init = init
        self.seed = seed

    def _config(self) -> SearchConfig:
        return SearchConfig(**self.get_params())

    def fit(self, fitness: Fitness, y=None):
        result = search(self._config(), fitness)
        self.result_ = result
        self.best_schedule_ = result.best.schedule
        self.best_fitness_ = result.best.fitness
        self.history_ = result.history
        self.n_evaluations_ = result.n_evaluations
        return self

    def predict(self, X=None):
        check_is_fitted(self, "best_schedule_")
        return self.best_schedule_


class GreedyScheduleSearch(LevelSwitchSearch):
    """Hill-climbing baseline with the same parameters and fitted attributes."""

    def __init__(self, n_stages=10, l_max=16, target_level=8, population_size=20, offspring=16, survivors=4,
                 generations=100, max_mutation=None, init="mixed", seed=0, max_evaluations=None):
        super().__init__(n_stages, l_max, target_level, population_size, offspring, survivors, generations,
                         max_mutation, init, seed)
        self.max_evaluations = max_evaluations

    def _config(self) -> SearchConfig:
        params = self.get_params()
        params.pop("max_evaluations")
        return SearchConfig(**params)

    def fit(self, fitness: Fitness, y=None):
        result = greedy_search(self._config(), fitness, self.max_evaluations)
        self.result_ = result
        self.best_schedule_ = result.best.schedule
        self.best_fitness_ = result.best.fitness
        self.history_ = result.history
        self.n_evaluations_ = result.n_evaluations
        return self
