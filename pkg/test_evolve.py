#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Testes de população, mutações, descendentes e torneio
"""

import math

import numpy as np
import pytest
from scipy.stats import binomtest

from errors import NodeCapExceeded, SearchSetupError, SelectionError
from evolve import (
    MUTATIONS, Individual, Population, apply_mutation, get_node, init_population, is_valid_graph,
    make_offspring, mutate_delete, mutate_insert, mutate_replace, node_paths, random_loss, replace_node,
    tournament_select,
)
from loss_expr import (
    ARITY, BOX_LEAVES, OPERATORS, PREDICTION_LEAVES, MultiBranchLoss, format_formula, leaf, parse_formula,
    random_graph,
)
from proxy import BranchSpec

SEG_BRANCHES = (BranchSpec('seg', 'seg', 'miou'),)
DET_BRANCHES = (BranchSpec('cls', 'cls', 'gacc', 1.0), BranchSpec('reg', 'box', 'iou', 10.0))


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def individual(formula: str, fitness=None, generation: int = 0) -> Individual:
    ind = Individual(MultiBranchLoss.single(parse_formula(formula)), generation)
    if fitness is not None:
        ind.set_fitness(fitness)
    return ind


# =============================================================================
# Indivíduo e população
# =============================================================================

class TestPopulation:
    def test_fitness_is_set_once(self):
        ind = individual('y', 0.5)
        assert ind.evaluated
        with pytest.raises(ValueError):
            ind.set_fitness(0.7)

    def test_cache_hit_flag(self):
        ind = individual('y')
        ind.set_fitness(0.3, cache_hit=True)
        assert ind.cache_hit and ind.fitness == 0.3

    def test_recency_window_drops_oldest(self):
        population = Population(3)
        members = [individual('y', float(i), i) for i in range(5)]
        for member in members:
            population.insert(member)
        assert len(population) == 3
        assert list(population) == members[2:]

    def test_evaluated_filter(self):
        population = Population(5, [individual('y', 0.1), individual('yhat')])
        assert len(population.evaluated()) == 1

    def test_capacity_must_be_positive(self):
        with pytest.raises(ValueError):
            Population(0)


# =============================================================================
# Navegação e mutações
# =============================================================================

class TestTreeHelpers:
    def test_paths_cover_every_node(self):
        g = parse_formula('add(neg(y), mul(yhat, one))')
        paths = node_paths(g.body)
        assert len(paths) == g.node_count()
        assert get_node(g.body, (1, 0)).kind == 'yhat'

    def test_replace_node(self):
        g = parse_formula('add(neg(y), yhat)')
        body = replace_node(g.body, (0, 0), leaf('one'))
        assert format_formula(body) == 'add(neg(one), yhat)'

    def test_is_valid_graph(self):
        g = parse_formula('add(neg(y), yhat)')
        assert is_valid_graph(g)
        assert not is_valid_graph(g, node_cap=3)


class TestMutations:
    def test_insert_unary(self, rng):
        g = parse_formula('add(y, yhat)')
        assert format_formula(mutate_insert(g, rng, op='neg', path=(0,))) == 'add(neg(y), yhat)'

    def test_insert_binary_adds_fresh_leaf(self, rng):
        g = parse_formula('neg(yhat)')
        result = mutate_insert(g, rng, BOX_LEAVES, op='mul', path=())
        assert result.body.kind == 'mul'
        assert format_formula(result.body.children[0]) == 'neg(yhat)'
        assert result.body.children[1].kind in BOX_LEAVES

    def test_insert_respects_node_cap(self, rng):
        g = parse_formula('add(y, yhat)')
        with pytest.raises(NodeCapExceeded):
            mutate_insert(g, rng, node_cap=g.node_count(), op='neg', path=())

    def test_delete_promotes_child(self, rng):
        g = parse_formula('neg(y)')
        assert format_formula(mutate_delete(g, rng, path=())) == 'y'

    def test_delete_on_leaf_only_graph(self, rng):
        g = parse_formula('yhat')
        assert mutate_delete(g, rng) == g

    def test_delete_never_grows(self, rng):
        g = parse_formula('add(mul(y, yhat), exp(one))')
        for _ in range(20):
            assert mutate_delete(g, rng).node_count() < g.node_count()

    def test_replace_drops_extra_children(self, rng):
        g = parse_formula('add(y, yhat)')
        result = mutate_replace(g, rng, op='neg', path=())
        assert format_formula(result) in ('neg(y)', 'neg(yhat)')

    def test_replace_fills_missing_children(self, rng):
        g = parse_formula('neg(y)')
        result = mutate_replace(g, rng, op='add', path=(0,))
        replaced = result.body.children[0]
        assert replaced.kind == 'add'
        assert all(child.kind in PREDICTION_LEAVES for child in replaced.children)

    def test_replace_keeps_each_child_half_the_time(self, rng):
        g = parse_formula('add(y, yhat)')
        kept_y = sum(format_formula(mutate_replace(g, rng, op='neg', path=())) == 'neg(y)' for _ in range(2000))
        assert binomtest(kept_y, 2000, 0.5).pvalue > 0.01

    def test_insert_grows_by_arity(self, rng):
        for trial in range(1000):
            g = random_graph(3, rng)
            kind = OPERATORS[trial % len(OPERATORS)]
            result = mutate_insert(g, rng, op=kind)
            assert result.node_count() - g.node_count() == ARITY[kind]
            assert is_valid_graph(result)

    def test_branch_name_survives(self, rng):
        g = parse_formula('neg(i)', 'reg')
        assert mutate_insert(g, rng, BOX_LEAVES).branch_name == 'reg'
        assert mutate_replace(g, rng, BOX_LEAVES).branch_name == 'reg'


# =============================================================================
# Descendentes
# =============================================================================

class TestOffspring:
    def test_copy(self, rng):
        parent = random_loss(SEG_BRANCHES, rng, 3)
        child, path = make_offspring(parent, rng, SEG_BRANCHES, copy_probability=1.0, return_path=True)
        assert path == 'copy'
        assert child.branches == parent.branches

    def test_reinit_has_depth_d(self, rng):
        parent = random_loss(DET_BRANCHES, rng, 3, (1.0, 10.0))
        child, path = make_offspring(parent, rng, DET_BRANCHES, depth=2, copy_probability=0.0,
                                     reinit_probability=1.0, return_path=True)
        assert path == 'reinit'
        assert child.names == ('cls', 'reg')
        assert child.weights == (1.0, 10.0)
        for graph in child.branches:
            assert set(graph.path_depths()) == {2}

    def test_mutate_keeps_leaf_sets(self, rng):
        parent = random_loss(DET_BRANCHES, rng, 3)
        for _ in range(30):
            child, path = make_offspring(parent, rng, DET_BRANCHES, copy_probability=0.0,
                                         reinit_probability=0.0, return_path=True)
            assert path == 'mutate'
            assert set(child.branch('reg').body.leaves()) <= set(BOX_LEAVES)
            assert set(child.branch('cls').body.leaves()) <= set(PREDICTION_LEAVES)

    def test_node_cap_is_never_exceeded(self, rng):
        parent = random_loss(SEG_BRANCHES, rng, 3)
        for _ in range(100):
            parent = make_offspring(parent, rng, SEG_BRANCHES, node_cap=20)
            assert all(g.node_count() <= 20 for g in parent.branches)

    def test_path_frequencies(self, rng):
        parent = random_loss(SEG_BRANCHES, rng, 2)
        paths = [make_offspring(parent, rng, SEG_BRANCHES, return_path=True)[1] for _ in range(2000)]
        assert 0.07 < paths.count('copy') / 2000 < 0.13
        assert 0.40 < paths.count('reinit') / 2000 < 0.50


# =============================================================================
# População inicial e torneio
# =============================================================================

class TestInitPopulation:
    def test_accept_all(self, rng):
        population = init_population(6, SEG_BRANCHES, rng, depth=3)
        assert len(population) == 6
        assert all(ind.origin == 'init' and ind.passed_rejection is None for ind in population)

    def test_predicate_marks_passed_rejection(self, rng):
        population = init_population(3, SEG_BRANCHES, rng, lambda graph: True)
        assert all(ind.passed_rejection is True for ind in population)

    def test_counts_one_candidate_per_loss(self, rng):
        verdicts = iter([False, True, True, True, False, False, True])
        counted = []
        init_population(2, DET_BRANCHES, rng, lambda graph: next(verdicts),
                        on_candidate=lambda: counted.append(1))
        # cls rejeitado, cls+reg aceitos, reg rejeitado duas vezes, reg aceito
        assert len(counted) == 5

    def test_stops_when_budget_runs_out(self, rng):
        calls = []

        def budget_left():
            calls.append(1)
            return len(calls) <= 3

        population = init_population(5, SEG_BRANCHES, rng, lambda graph: False,
                                     max_attempts=100, budget_left=budget_left)
        assert len(population) == 0
        assert len(calls) == 4

    def test_predicate_runs_per_branch(self, rng):
        seen = []

        def accept(graph):
            seen.append(graph.branch_name)
            return True

        init_population(2, DET_BRANCHES, rng, accept)
        assert seen == ['cls', 'reg', 'cls', 'reg']

    def test_gives_up_after_max_attempts(self, rng):
        with pytest.raises(SearchSetupError):
            init_population(2, SEG_BRANCHES, rng, lambda graph: False, max_attempts=10)

    def test_seeds_come_first(self, rng):
        seed = MultiBranchLoss.single(parse_formula('neg(mul(y, log(yhat)))', 'seg'))
        population = init_population(3, SEG_BRANCHES, rng, seeds=[seed])
        first = next(iter(population))
        assert first.origin == 'seed' and first.loss == seed

    def test_rejected_seed_is_skipped(self, rng):
        seed = MultiBranchLoss.single(parse_formula('one', 'seg'))
        population = init_population(2, SEG_BRANCHES, rng, lambda g: format_formula(g) != 'one', seeds=[seed])
        assert all(ind.origin == 'init' for ind in population)


class TestTournament:
    def test_requires_evaluated_members(self, rng):
        with pytest.raises(SelectionError):
            tournament_select(Population(5, [individual('y')]), 0.5, rng)

    def test_full_tournament_returns_best(self, rng):
        members = [individual('y', 0.2, 1), individual('yhat', 0.9, 2), individual('one', 0.5, 3)]
        assert tournament_select(Population(5, members), 1.0, rng) is members[1]

    def test_tie_goes_to_newest_generation(self, rng):
        members = [individual('y', 0.5, 1), individual('yhat', 0.5, 4), individual('one', 0.5, 2)]
        assert tournament_select(Population(5, members), 1.0, rng) is members[1]

    def test_higher_fitness_is_selected_more_often(self, rng):
        members = [individual('y', i / 100, i) for i in range(100)]
        population = Population(100, members)
        picks = np.zeros(10)
        for _ in range(10000):
            picks[int(round(tournament_select(population, 0.05, rng).fitness * 100)) // 10] += 1
        # máximo de 5 sorteados sem reposição entre 100: P(máx <= x) = C(x, 5) / C(100, 5)
        cdf = [math.comb(10 * d, 5) / math.comb(100, 5) for d in range(11)]
        expected = np.diff(cdf)
        np.testing.assert_allclose(picks / 10000, expected, atol=0.02)
        assert np.all(np.diff(picks[4:]) > 0)

    def test_small_ratio_samples_one(self, rng):
        members = [individual('y', float(i) / 10, i) for i in range(10)]
        picks = {id(tournament_select(Population(10, members), 0.05, rng)) for _ in range(200)}
        assert len(picks) > 1


@pytest.mark.slow
def test_mutation_chains_stay_valid():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        g = random_graph(3, rng)
        for _ in range(100):
            name = MUTATIONS[int(rng.integers(len(MUTATIONS)))]
            try:
                g = apply_mutation(name, g, rng, node_cap=32)
            except NodeCapExceeded:
                continue
            assert is_valid_graph(g, node_cap=32)
