"""Tests for the reference searchers."""
import unittest

import numpy as np
import pytest

from cellsearch.baselines import (
    EvolutionConfig,
    EvolutionState,
    HyperbandSearch,
    JointBOHBSearch,
    RandomSearch,
    RegularizedEvolution,
    TPESearch,
    hyperband_random_step,
    mutate,
    regularized_evolution_step,
)
from cellsearch.benchmark import OracleSpec, SyntheticOracle
from cellsearch.bohb import BOHBSearcher, BudgetLadder
from cellsearch.search_space import SearchSpace, decode_cell
from cellsearch.tpe import SplitSpec


def small_oracle(**kwargs):
    kwargs.setdefault("n_nodes", 4)
    kwargs.setdefault("op_choices", 3)
    kwargs.setdefault("seed", 2)
    return SyntheticOracle(OracleSpec(**kwargs))


def differences(parent, child):
    """(edge bits flipped, nodes whose operator changed)."""
    edges = sum(a != b for a, b in zip(parent.skip.edges, child.skip.edges))
    nodes = sum(a != b for a, b in zip(parent.ops, child.ops))
    return edges, nodes


@pytest.mark.unit
class TestMutate(unittest.TestCase):
    def setUp(self):
        self.space = SearchSpace.reduced(5, 6)
        self.rng = np.random.default_rng(0)

    def test_exactly_one_change(self):
        for _ in range(300):
            parent = self.space.sample_cell(self.rng)
            child = mutate(parent, self.space, self.rng)
            self.assertNotEqual(child, parent)
            self.assertIn(differences(parent, child), {(1, 0), (0, 1)})
            self.assertTrue(self.space.contains(child))

    def test_single_kind(self):
        for kind in ("edge", "op", "act", "init"):
            with self.subTest(kind=kind):
                for _ in range(50):
                    parent = self.space.sample_cell(self.rng)
                    child = mutate(parent, self.space, self.rng, (kind,))
                    expected = (1, 0) if kind == "edge" else (0, 1)
                    self.assertEqual(differences(parent, child), expected)

    def test_no_applicable_mutation(self):
        space = SearchSpace.reduced(2, 3)
        parent = space.sample_cell(self.rng)
        # the only edge of a two-node cell cannot be removed
        with self.assertRaises(ValueError):
            mutate(parent, space, self.rng, ("edge",))
        child = mutate(parent, space, self.rng)
        self.assertEqual(differences(parent, child), (0, 1))

    def test_evolution_config_validation(self):
        with self.assertRaises(ValueError):
            EvolutionConfig(population_size=1)
        with self.assertRaises(ValueError):
            EvolutionConfig(population_size=5, tournament_size=6)
        with self.assertRaises(ValueError):
            EvolutionConfig(mutation_kinds=("swap",))


@pytest.mark.unit
class TestRegularizedEvolution(unittest.TestCase):
    def test_population_ages_out_oldest(self):
        oracle = small_oracle()
        state = EvolutionState(EvolutionConfig(population_size=10, tournament_size=3))
        rng = np.random.default_rng(1)
        for _ in range(30):
            regularized_evolution_step(state, rng, oracle)
            self.assertLessEqual(len(state.population), 10)
        self.assertEqual(len(state.population), 10)
        self.assertEqual(state.removed, state.history[:20])
        self.assertEqual(list(state.population), state.history[20:])
        self.assertEqual([o.timestamp for o in state.history], list(range(30)))

    def test_children_are_single_mutations_of_population(self):
        oracle = small_oracle()
        state = EvolutionState(EvolutionConfig(population_size=6, tournament_size=2))
        rng = np.random.default_rng(2)
        for _ in range(6):
            regularized_evolution_step(state, rng, oracle)
        for _ in range(20):
            before = [o.config for o in state.population]
            child = regularized_evolution_step(state, rng, oracle).config
            self.assertTrue(any(differences(p, child) in {(1, 0), (0, 1)} for p in before))

    def test_searcher_evaluates_at_largest_budget(self):
        trace = RegularizedEvolution(small_oracle(), np.random.default_rng(3),
                                     EvolutionConfig(population_size=5, tournament_size=2)).run(max_evals=15)
        self.assertEqual([s.budget for s in trace.steps], [108] * 15)
        self.assertEqual(trace.cum_epochs, 15 * 108)


@pytest.mark.unit
class TestRandomSearch(unittest.TestCase):
    def test_trace_is_monotone(self):
        oracle = small_oracle(noise_sd=0.02)
        trace = RandomSearch(oracle, np.random.default_rng(4)).run(max_evals=40)
        best = trace.values()
        self.assertTrue((np.diff(best) >= 0.0).all())
        np.testing.assert_array_equal(trace.costs(), 108 * np.arange(1, 41))
        self.assertEqual(best[-1], max(s.val_acc for s in trace.steps))

    def test_stops_on_cost(self):
        trace = RandomSearch(small_oracle(), np.random.default_rng(5)).run(max_cost=500)
        self.assertEqual(len(trace), 5)

    def test_seed_determinism(self):
        first = RandomSearch(small_oracle(), np.random.default_rng(6)).run(max_evals=10)
        second = RandomSearch(small_oracle(), np.random.default_rng(6)).run(max_evals=10)
        self.assertEqual(first.steps, second.steps)


@pytest.mark.unit
class TestScheduledBaselines(unittest.TestCase):
    def setUp(self):
        self.ladder = BudgetLadder(1, 9, 3)
        self.oracle = small_oracle(ladder=self.ladder)

    def test_hyperband_needs_uniform_sampling(self):
        bohb = BOHBSearcher(self.oracle.space, SplitSpec(rho=0.0), self.ladder, np.random.default_rng(0),
                            alternate=False, blocker=None)
        with self.assertRaises(ValueError):
            hyperband_random_step(bohb, self.oracle)

    def test_hyperband_cycle_cost(self):
        searcher = HyperbandSearch(self.oracle, np.random.default_rng(7), SplitSpec(rho=0.0))
        self.assertEqual(searcher.bohb.spec.rho, 1.0)
        # brackets (1x9, 3x3, 9x1), (3x5, 9x1), (9x3)
        trace = searcher.run(max_evals=13 + 6 + 3)
        self.assertEqual(trace.cum_epochs, 27 + 24 + 27)
        self.assertEqual(trace.cum_epochs, searcher.bohb.charged_epochs)

    def test_hyperband_promotes_within_bracket(self):
        trace = HyperbandSearch(self.oracle, np.random.default_rng(8)).run(max_evals=13)
        rung0 = {s.cell for s in trace.steps[:9]}
        self.assertTrue({s.cell for s in trace.steps[9:]} <= rung0)
        self.assertEqual([s.budget for s in trace.steps[9:]], [3, 3, 3, 9])

    def test_joint_bohb_does_not_alternate(self):
        searcher = JointBOHBSearch(self.oracle, np.random.default_rng(9))
        searcher.run(max_evals=30)
        self.assertFalse(searcher.bohb.alternate)
        self.assertEqual(len(searcher.bohb.pools), 30)

    def test_tpe_grows_pool_at_largest_budget(self):
        searcher = TPESearch(self.oracle, np.random.default_rng(10), SplitSpec(n_min=3))
        trace = searcher.run(max_evals=25)
        self.assertEqual(len(searcher.pool), 25)
        self.assertTrue(all(o.budget == 9 for o in searcher.pool))
        self.assertTrue(all(self.oracle.space.contains(decode_cell(s.cell)) for s in trace.steps))

    def test_scheduled_baselines_are_deterministic(self):
        for cls in (HyperbandSearch, JointBOHBSearch, TPESearch):
            with self.subTest(cls=cls.__name__):
                first = cls(self.oracle, np.random.default_rng(11)).run(max_evals=20)
                second = cls(self.oracle, np.random.default_rng(11)).run(max_evals=20)
                self.assertEqual(first.steps, second.steps)


if __name__ == "__main__":
    unittest.main()
