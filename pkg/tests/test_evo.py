import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from stageprune._validation import check_schedule
from stageprune.evo import (
    GreedyScheduleSearch,
    Individual,
    LevelSwitchSearch,
    SearchConfig,
    compose,
    evaluate,
    global_sparsity,
    greedy_search,
    init_population,
    mutate,
    patterned_schedules,
    rank,
    search,
    step_generation,
    uniform_schedule,
)
from stageprune.exceptions import InvalidConfig


def quadratic(target):
    target = np.asarray(target, float)

    def f(s):
        return -float(np.sum((np.asarray(s) - target) ** 2))

    return f


TARGET = (2, 4, 6, 8, 10, 12, 14, 10, 8, 6)  # sums to 80


@st.composite
def schedules(draw):
    n = draw(st.integers(2, 12))
    l_max = draw(st.integers(1, 20))
    levels = draw(st.lists(st.integers(0, l_max), min_size=n, max_size=n))
    return tuple(levels), l_max


class TestConfig:
    def test_defaults(self):
        cfg = SearchConfig()
        assert cfg.budget == 80 and cfg.mutation_magnitude == 5 and cfg.evaluation_budget == 20 + 16 * 100

    @pytest.mark.parametrize(
        "kw",
        [dict(offspring=10), dict(max_mutation=0), dict(max_mutation=17), dict(target_level=17), dict(init="x")],
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfig):
            SearchConfig(**kw)


class TestInit:
    def test_uniform(self):
        assert uniform_schedule(10, 80, 16) == (8,) * 10
        assert uniform_schedule(4, 6, 16) == (2, 2, 1, 1)
        assert uniform_schedule(5, 0, 16) == (0,) * 5
        with pytest.raises(InvalidConfig):
            uniform_schedule(3, 49, 16)

    def test_uniform_mode(self):
        pop = init_population(SearchConfig(), np.random.default_rng(0), mode="uniform")
        assert len(pop) == 20 and all(ind.schedule == (8,) * 10 for ind in pop)

    def test_zero_budget_gives_zero_schedules(self):
        cfg = SearchConfig(target_level=0)
        for mode in ("uniform", "random", "patterned", "mixed"):
            assert {ind.schedule for ind in init_population(cfg, np.random.default_rng(0), mode)} == {(0,) * 10}

    def test_random_inits_valid(self):
        rng = np.random.default_rng(1)
        for level in range(17):
            cfg = SearchConfig(target_level=level, population_size=50, offspring=46)
            for ind in init_population(cfg, rng, mode="random"):
                check_schedule(ind.schedule, 10, 16, cfg.budget)

    def test_thousand_random_initialisations(self):
        rng = np.random.default_rng(2)
        cfg = SearchConfig(population_size=1000, offspring=996)
        pop = init_population(cfg, rng, mode="random")
        assert len(pop) == 1000
        for ind in pop:
            check_schedule(ind.schedule, 10, 16, 80)
        assert len({ind.schedule for ind in pop}) > 900

    def test_patterned_shapes(self):
        up, down, mid, edge = patterned_schedules(10, 80, 16)
        for p in (up, down, mid, edge):
            check_schedule(p, 10, 16, 80)
        assert list(up) == sorted(up) and up[0] < up[-1]
        assert list(down) == sorted(down, reverse=True)
        assert mid[4] > mid[0] and mid[5] > mid[-1]
        assert edge[0] > edge[4] and edge[-1] > edge[5]

    def test_compose_respects_bounds(self):
        s = compose([100, 1, 1, 1], 30, 16)
        assert sum(s) == 30 and max(s) <= 16

    def test_mixed_seeds_uniform_first(self):
        pop = init_population(SearchConfig(), np.random.default_rng(0))
        assert pop[0].schedule == (8,) * 10
        assert len({ind.schedule for ind in pop}) == 20


class TestMutate:
    def test_forced_switch(self):
        child = mutate(Individual((5, 5)), None, 3, 16, force=(0, 1, 3))
        assert child.schedule == (8, 2) and not child.stuck

    def test_lineage(self):
        parent = Individual((8,) * 10, generation=3)
        child = mutate(parent, np.random.default_rng(0), 5, 16)
        assert child.parent == parent.uid and child.generation == 4 and child.fitness is None

    def test_stuck_when_no_move_exists(self):
        child = mutate(Individual((0, 0, 0)), np.random.default_rng(0), 5, 16)
        assert child.stuck and child.schedule == (0, 0, 0)
        assert mutate(Individual((7,)), np.random.default_rng(0), 5, 16).stuck

    def test_exactly_one_switch(self):
        rng = np.random.default_rng(3)
        parent = Individual((8,) * 10)
        for _ in range(200):
            d = np.subtract(mutate(parent, rng, 5, 16).schedule, parent.schedule)
            nz = d[d != 0]
            assert len(nz) == 2 and nz.sum() == 0 and 1 <= abs(nz[0]) <= 5

    @settings(max_examples=200, deadline=None)
    @given(schedules(), st.integers(1, 20), st.integers(0, 2**32 - 1))
    def test_conservation_and_bounds(self, sl, mag, seed):
        levels, l_max = sl
        mag = min(mag, l_max)
        rng = np.random.default_rng(seed)
        ind = Individual(levels)
        for _ in range(20):
            ind = mutate(ind, rng, mag, l_max)
            assert sum(ind.schedule) == sum(levels)
            assert all(0 <= v <= l_max for v in ind.schedule)

    @settings(max_examples=100, deadline=None)
    @given(schedules(), schedules(), st.integers(0, 2**32 - 1))
    def test_reachability(self, a, b, seed):
        (la, l_max), (lb, _) = a, b
        n = min(len(la), len(lb))
        src = np.minimum(np.asarray(la[:n]), l_max)
        dst = np.minimum(np.asarray(lb[:n]), l_max)
        # rebalance the destination to the source budget
        dst = np.asarray(compose(dst + 1e-3, int(src.sum()), l_max))
        ind = Individual(tuple(int(v) for v in src))
        for _ in range(10 * n * l_max + 1):
            cur = np.asarray(ind.schedule)
            if np.array_equal(cur, dst):
                break
            gap = dst - cur
            i, j = int(np.argmax(gap)), int(np.argmin(gap))
            delta = int(min(gap[i], -gap[j], 5))
            ind = mutate(ind, None, 5, l_max, force=(i, j, delta))
            assert not ind.stuck
        assert ind.schedule == tuple(int(v) for v in dst)


class TestSelection:
    def test_identical_individuals_keep_first_by_rule(self):
        cfg = SearchConfig()
        pop = [Individual((8,) * 10, fitness=0.5) for _ in range(20)]
        nxt = step_generation(pop, cfg, quadratic(TARGET), np.random.default_rng(0), 1)
        assert nxt[:4] == pop[:4]
        assert len(nxt) == 20

    def test_ties_prefer_lexicographically_smaller(self):
        pop = [Individual((9, 7), fitness=1.0), Individual((7, 9), fitness=1.0), Individual((8, 8), fitness=2.0)]
        assert [ind.schedule for ind in rank(pop)] == [(8, 8), (7, 9), (9, 7)]

    def test_elitism(self):
        cfg = SearchConfig()
        rng = np.random.default_rng(0)
        f = quadratic(TARGET)
        pop = init_population(cfg, rng)
        for ind in pop:
            evaluate(ind, f)
        best = max(ind.fitness for ind in pop)
        nxt = step_generation(pop, cfg, f, rng, 1)
        assert max(ind.fitness for ind in nxt) >= best
        assert all(ind.fitness is not None for ind in nxt)

    def test_requires_evaluated(self):
        with pytest.raises(InvalidConfig):
            step_generation([Individual((8,) * 10)] * 20, SearchConfig(), quadratic(TARGET),
                            np.random.default_rng(0), 1)

    def test_individual_hash(self):
        a, b = Individual((1, 2)), Individual((1, 2), fitness=3.0)
        assert a == b and hash(a) == hash(b) and len({a, b}) == 1


class TestSearch:
    def test_zero_generations(self):
        cfg = SearchConfig(generations=0)
        res = search(cfg, quadratic(TARGET))
        init = init_population(cfg, np.random.default_rng(0))
        f = quadratic(TARGET)
        assert res.best.fitness == max(f(i.schedule) for i in init)
        assert len(res.history) == 1 and res.n_evaluations == 20

    def test_deterministic(self):
        cfg = SearchConfig(generations=15, seed=7)
        a, b = search(cfg, quadratic(TARGET)), search(cfg, quadratic(TARGET))
        assert a.history == b.history and a.best.schedule == b.best.schedule

    def test_monotone_and_at_least_uniform(self):
        f = quadratic(TARGET)
        res = search(SearchConfig(generations=60, seed=1), f)
        best = [h["best"] for h in res.history]
        assert all(y >= x for x, y in zip(best, best[1:]))
        assert res.best.fitness >= f((8,) * 10)
        assert res.n_evaluations == 20 + 16 * 60

    def test_finds_quadratic_optimum(self):
        res = search(SearchConfig(generations=100, seed=0), quadratic(TARGET))
        assert res.best.schedule == TARGET

    def test_budget_preserved_everywhere(self):
        seen = []

        def f(s):
            seen.append(tuple(s))
            return quadratic(TARGET)(s)

        search(SearchConfig(generations=20), f)
        assert all(sum(s) == 80 and min(s) >= 0 and max(s) <= 16 for s in seen)

    def test_global_sparsity(self):
        assert global_sparsity((0,) * 10, 16) == 0
        assert global_sparsity((16,) * 10, 16) == 1
        assert global_sparsity(TARGET, 16) == 0.5


class TestGreedy:
    def test_single_stage(self):
        res = greedy_search(SearchConfig(n_stages=1, target_level=5), quadratic([3]))
        assert res.best.schedule == (5,) and res.n_evaluations == 1

    def test_climbs_concave_objective(self):
        res = greedy_search(SearchConfig(), quadratic(TARGET), max_evaluations=10_000)
        assert res.best.schedule == TARGET

    def test_evaluation_cap(self):
        calls = []

        def f(s):
            calls.append(s)
            assert sum(s) == 80
            return quadratic(TARGET)(s)

        res = greedy_search(SearchConfig(generations=2), f)
        assert res.n_evaluations == len(calls) <= 20 + 16 * 2

    def test_stops_at_local_optimum(self):
        # two separated peaks; unit steps from uniform cannot cross the valley
        def f(s):
            s = np.asarray(s)
            return float(-np.sum((s - 8) ** 2)) if s[0] <= 10 else 100.0 + s[0]

        res = greedy_search(SearchConfig(), f, max_evaluations=5000)
        assert res.best.schedule == (8,) * 10
        assert res.n_evaluations == 1 + 90


class TestEstimators:
    def test_level_switch_search(self):
        est = LevelSwitchSearch(generations=10, seed=3)
        assert clone(est).get_params()["generations"] == 10
        est.fit(quadratic(TARGET))
        assert sum(est.best_schedule_) == 80 and len(est.history_) == 11
        assert est.predict() == est.best_schedule_
        assert est.n_evaluations_ == 20 + 160

    def test_greedy_estimator(self):
        est = GreedyScheduleSearch(generations=3, max_evaluations=50).fit(quadratic(TARGET))
        assert est.n_evaluations_ <= 50
        assert "max_evaluations" in est.get_params()
