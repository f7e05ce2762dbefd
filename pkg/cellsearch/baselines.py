"""Reference searchers: random search, regularized evolution, Hyperband, TPE and joint BOHB."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Optional, Tuple

import numpy as np

from .benchmark import Oracle
from .bohb import BOHBSearcher, BudgetLadder
from .engine import ScheduledSearcher, Searcher, scheduled_step
from .logger import get_logger
from .search_space import (
    CellGraph,
    SearchSpace,
    SkipPattern,
    is_valid_skip_bits,
)
from .tpe import CellSubspace, Observation, SplitSpec, propose, with_rho

logger = get_logger(__name__)

MUTATION_KINDS: Tuple[str, ...] = ("edge", "op", "act", "init")


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 50
    tournament_size: int = 10
    mutation_kinds: Tuple[str, ...] = MUTATION_KINDS

    def __post_init__(self) -> None:
        if self.population_size < 2:
            raise ValueError(f"population_size: must be >= 2 (value: {self.population_size})")
        if not 1 <= self.tournament_size <= self.population_size:
            raise ValueError(
                f"tournament_size: must be in [1, {self.population_size}] (value: {self.tournament_size})"
            )
        unknown = set(self.mutation_kinds) - set(MUTATION_KINDS)
        if not self.mutation_kinds or unknown:
            raise ValueError(f"mutation_kinds: must be a non-empty subset of {MUTATION_KINDS} (value: {self.mutation_kinds})")


def _flip_edge(cell: CellGraph, rng: np.random.Generator) -> Optional[CellGraph]:
    n = cell.n_nodes
    for slot in rng.permutation(len(cell.skip.edges)):
        bits = list(cell.skip.edges)
        bits[slot] = not bits[slot]
        if is_valid_skip_bits(n, bits):
            return cell.with_skip(SkipPattern(n, tuple(bits)))
    return None


_OP_FIELDS = ("op", "act", "init")


def _change_field(cell: CellGraph, kind: str, space: SearchSpace, rng: np.random.Generator) -> Optional[CellGraph]:
    """Change one field of one node's generalized operator, staying inside ``space.op_choices``.

    When the domain has no operator differing only in ``kind``, any other
    operator of the domain is used instead.
    """
    for node in rng.permutation(cell.n_nodes):
        current = cell.ops[node]
        alternatives = [
            g for g in space.op_choices
            if getattr(g, kind) != getattr(current, kind)
            and all(getattr(g, other) == getattr(current, other) for other in _OP_FIELDS if other != kind)
        ]
        if not alternatives:
            alternatives = [g for g in space.op_choices if g != current]
        if alternatives:
            ops = list(cell.ops)
            ops[node] = alternatives[int(rng.integers(len(alternatives)))]
            return cell.with_ops(ops)
    return None


def mutate(
    cell: CellGraph,
    space: SearchSpace,
    rng: np.random.Generator,
    kinds: Tuple[str, ...] = MUTATION_KINDS,
) -> CellGraph:
    """Apply exactly one mutation: flip one edge or change one operator, activation or init."""
    for k in rng.permutation(len(kinds)):
        kind = kinds[int(k)]
        child = _flip_edge(cell, rng) if kind == "edge" else _change_field(cell, kind, space, rng)
        if child is not None:
            return child
    raise ValueError(f"no mutation applies to {cell}")


def random_search_step(rng: np.random.Generator, oracle: Oracle, timestamp: int = 0) -> Observation:
    """One uniform-random cell evaluated at the largest budget."""
    cell = oracle.space.sample_cell(rng)
    budget = oracle.ladder.max_budget
    return Observation(cell, budget, oracle.query(cell, budget), timestamp)


@dataclass
class EvolutionState:
    """Population in age order (oldest first) plus the full evaluation history."""

    config: EvolutionConfig = field(default_factory=EvolutionConfig)
    population: Deque[Observation] = field(default_factory=deque)
    history: List[Observation] = field(default_factory=list)
    removed: List[Observation] = field(default_factory=list)


def regularized_evolution_step(state: EvolutionState, rng: np.random.Generator, oracle: Oracle) -> Observation:
    """Fill the population at random, then tournament, mutate, evaluate and drop the oldest."""
    timestamp = len(state.history)
    if len(state.population) < state.config.population_size:
        observation = random_search_step(rng, oracle, timestamp)
        state.population.append(observation)
        state.history.append(observation)
        return observation

    picks = rng.choice(len(state.population), size=state.config.tournament_size, replace=False)
    parent = max((state.population[int(i)] for i in sorted(picks)), key=lambda o: o.accuracy)
    child = mutate(parent.config, oracle.space, rng, state.config.mutation_kinds)
    budget = oracle.ladder.max_budget
    observation = Observation(child, budget, oracle.query(child, budget), timestamp)
    state.population.append(observation)
    state.removed.append(state.population.popleft())
    logger.debug("evolution: parent %.4f -> child %.4f", parent.accuracy, observation.accuracy)
    state.history.append(observation)
    return observation


def hyperband_random_step(bohb: BOHBSearcher, oracle: Oracle) -> Observation:
    """One Hyperband slot whose fresh configurations are drawn uniformly."""
    if bohb.spec.rho < 1.0:
        raise ValueError(f"hyperband sampling needs rho = 1 (value: {bohb.spec.rho})")
    return scheduled_step(bohb, oracle, lambda slot: bohb.sample_candidate())


def pure_tpe_step(
    pool: List[Observation],
    spec: SplitSpec,
    subspace: CellSubspace,
    rng: np.random.Generator,
    oracle: Oracle,
) -> Observation:
    """One TPE proposal over the joint cell space, always at the largest budget; appended to ``pool``."""
    cell = propose(pool, spec, subspace, rng)
    budget = oracle.ladder.max_budget
    observation = Observation(cell, budget, oracle.query(cell, budget), len(pool))
    pool.append(observation)
    return observation


class RandomSearch(Searcher):
    name = "rs"

    def step(self) -> Observation:
        return self._record(random_search_step(self.rng, self.oracle, len(self.trace)))


class RegularizedEvolution(Searcher):
    name = "re"

    def __init__(self, oracle: Oracle, rng: np.random.Generator, config: Optional[EvolutionConfig] = None) -> None:
        super().__init__(oracle, rng)
        self.state = EvolutionState(config if config is not None else EvolutionConfig())

    def step(self) -> Observation:
        return self._record(regularized_evolution_step(self.state, self.rng, self.oracle))


class HyperbandSearch(ScheduledSearcher):
    name = "hb"

    def __init__(self, oracle: Oracle, rng: np.random.Generator, spec: Optional[SplitSpec] = None,
                 ladder: Optional[BudgetLadder] = None) -> None:
        spec = with_rho(spec if spec is not None else SplitSpec(), 1.0)
        bohb = BOHBSearcher(oracle.space, spec, ladder or oracle.ladder, rng, alternate=False, blocker=None)
        super().__init__(oracle, rng, bohb)

    def step(self) -> Observation:
        return self._record(hyperband_random_step(self.bohb, self.oracle))


class TPESearch(Searcher):
    name = "tpe"

    def __init__(self, oracle: Oracle, rng: np.random.Generator, spec: Optional[SplitSpec] = None) -> None:
        super().__init__(oracle, rng)
        self.spec = spec if spec is not None else SplitSpec()
        self.subspace = CellSubspace(oracle.space)
        self.pool: List[Observation] = []

    def step(self) -> Observation:
        return self._record(pure_tpe_step(self.pool, self.spec, self.subspace, self.rng, self.oracle))


class JointBOHBSearch(ScheduledSearcher):
    """Hyperband-scheduled TPE over the joint cell space: no alternation, no predictor."""

    name = "bohb"

    def __init__(self, oracle: Oracle, rng: np.random.Generator, spec: Optional[SplitSpec] = None,
                 ladder: Optional[BudgetLadder] = None) -> None:
        spec = spec if spec is not None else SplitSpec()
        bohb = BOHBSearcher(oracle.space, spec, ladder or oracle.ladder, rng, alternate=False, blocker=None)
        super().__init__(oracle, rng, bohb)
