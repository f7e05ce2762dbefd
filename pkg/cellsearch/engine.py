"""Search controller: alternating BOHB sampling filtered by the graph predictor.

Every searcher evaluates cells through an :class:`~cellsearch.benchmark.Oracle`
and records a :class:`RegretTrace`, so the baselines and the engine can be
compared step for step.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .benchmark import Oracle
from .bohb import BOHBSearcher, BudgetLadder, Slot
from .logger import get_logger
from .predictor import (
    GraphBatch,
    PredictorParams,
    TrainConfig,
    predict,
    rank_candidates,
    train,
)
from .search_space import CellGraph, DropBlocker, SearchSpace, SkipPattern, encode_cell
from .tpe import Observation, SplitSpec

logger = get_logger(__name__)


@dataclass(frozen=True)
class TraceStep:
    cum_epochs: int
    best_val_acc: float
    best_test_acc: float
    cell: str
    budget: int
    val_acc: float


class RegretTrace:
    """Per-evaluation record of cost and the best-so-far incumbent.

    The incumbent is the best validation accuracy seen; its test accuracy is
    what ``best_test_acc`` reports.
    """

    def __init__(self) -> None:
        self.steps: List[TraceStep] = []
        self.incumbent: Optional[CellGraph] = None
        self._first_seen: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def cum_epochs(self) -> int:
        return self.steps[-1].cum_epochs if self.steps else 0

    @property
    def best_val_acc(self) -> float:
        return self.steps[-1].best_val_acc if self.steps else 0.0

    @property
    def best_test_acc(self) -> float:
        return self.steps[-1].best_test_acc if self.steps else 0.0

    def record(
        self,
        cell: CellGraph,
        budget: int,
        accuracy: float,
        test_accuracy: Callable[[CellGraph], float],
    ) -> TraceStep:
        if budget < 1:
            raise ValueError(f"budget: must be >= 1 (value: {budget})")
        best_val, best_test = self.best_val_acc, self.best_test_acc
        if self.incumbent is None or accuracy > best_val:
            self.incumbent = cell
            best_val, best_test = accuracy, test_accuracy(cell)
        encoding = encode_cell(cell)
        self._first_seen.setdefault(encoding, len(self.steps) + 1)
        step = TraceStep(self.cum_epochs + budget, best_val, best_test, encoding, budget, accuracy)
        self.steps.append(step)
        return step

    def evals_to(self, cell: CellGraph) -> Optional[int]:
        """1-based index of the first evaluation of ``cell`` at any budget."""
        return self._first_seen.get(encode_cell(cell))

    def costs(self) -> np.ndarray:
        return np.array([s.cum_epochs for s in self.steps], dtype=np.int64)

    def values(self, attribute: str = "best_val_acc") -> np.ndarray:
        return np.array([getattr(s, attribute) for s in self.steps], dtype=float)


class Searcher(ABC):
    """One search run against an oracle; subclasses implement :meth:`step`."""

    name = "searcher"

    def __init__(self, oracle: Oracle, rng: np.random.Generator) -> None:
        self.oracle = oracle
        self.rng = rng
        self.trace = RegretTrace()

    @property
    def space(self) -> SearchSpace:
        return self.oracle.space

    @property
    def max_budget(self) -> int:
        return self.oracle.ladder.max_budget

    @abstractmethod
    def step(self) -> Observation:
        """Evaluate exactly one cell and record it in the trace."""

    def _record(self, observation: Observation) -> Observation:
        self.trace.record(observation.config, observation.budget, observation.accuracy, self.oracle.test_accuracy)
        return observation

    def run(
        self,
        max_cost: Optional[int] = None,
        max_evals: Optional[int] = None,
        target: Optional[CellGraph] = None,
    ) -> RegretTrace:
        """Step until the cost or evaluation budget is spent, or ``target`` has been evaluated."""
        if max_cost is None and max_evals is None and target is None:
            raise ValueError("run needs max_cost, max_evals or target")
        while True:
            if max_cost is not None and self.trace.cum_epochs >= max_cost:
                break
            if max_evals is not None and len(self.trace) >= max_evals:
                break
            if target is not None and self.trace.evals_to(target) is not None:
                break
            self.step()
        logger.debug(
            "%s finished: %d evaluations, %d epochs, best %.4f",
            self.name, len(self.trace), self.trace.cum_epochs, self.trace.best_val_acc,
        )
        return self.trace


def scheduled_step(
    bohb: BOHBSearcher,
    oracle: Oracle,
    fresh_candidate: Callable[[Slot], CellGraph],
) -> Observation:
    """Fill the next Hyperband slot, evaluate it and report the result to the scheduler."""
    slot = bohb.next_slot()
    cell = slot.config if slot.config is not None else fresh_candidate(slot)
    accuracy = oracle.query(cell, slot.budget)
    return bohb.report(slot, cell, accuracy)


class ScheduledSearcher(Searcher):
    """Searchers driven by a :class:`BOHBSearcher` slot stream."""

    def __init__(self, oracle: Oracle, rng: np.random.Generator, bohb: BOHBSearcher) -> None:
        super().__init__(oracle, rng)
        self.bohb = bohb

    def fresh_candidate(self, slot: Slot) -> CellGraph:
        return self.bohb.sample_candidate()

    def step(self) -> Observation:
        return self._record(scheduled_step(self.bohb, self.oracle, self.fresh_candidate))


@dataclass(frozen=True)
class EngineConfig:
    """Controller settings; ``warmup_evals=None`` keeps the predictor filter off."""

    warmup_evals: Optional[int] = 100
    filter_pool: int = 16
    filter_quantile: float = 0.25
    retrain_every: int = 50
    alternate: bool = True
    split: SplitSpec = field(default_factory=SplitSpec)
    ladder: BudgetLadder = field(default_factory=BudgetLadder)
    train: TrainConfig = field(default_factory=TrainConfig)
    blocker: Optional[DropBlocker] = field(default_factory=DropBlocker)

    def __post_init__(self) -> None:
        if self.warmup_evals is not None and self.warmup_evals < 0:
            raise ValueError(f"warmup_evals: must be >= 0 (value: {self.warmup_evals})")
        if self.filter_pool < 1:
            raise ValueError(f"filter_pool: must be >= 1 (value: {self.filter_pool})")
        if not 0.0 < self.filter_quantile <= 1.0:
            raise ValueError(f"filter_quantile: must be in (0, 1] (value: {self.filter_quantile})")
        if self.retrain_every < 1:
            raise ValueError(f"retrain_every: must be >= 1 (value: {self.retrain_every})")
        levels = len(self.ladder.budgets)
        if self.train.n_budget_levels != levels:
            object.__setattr__(self, "train", replace(self.train, n_budget_levels=levels))

    @property
    def keep_per_pool(self) -> int:
        return max(1, math.ceil(self.filter_quantile * self.filter_pool))

    def for_ladder(self, ladder: BudgetLadder) -> "EngineConfig":
        return replace(self, ladder=ladder)


def observations_to_batch(observations: Sequence[Observation], ladder: BudgetLadder) -> GraphBatch:
    return GraphBatch.from_cells(
        [o.config for o in observations],
        [ladder.index_of(o.budget) for o in observations],
        [o.accuracy for o in observations],
    )


class GPNASSearcher(ScheduledSearcher):
    """Alternating BOHB whose fresh proposals pass through a predictor filter after warm-up.

    Once active, ``filter_pool`` proposals are scored at the slot's budget and
    the best ``filter_quantile`` of them are queued for evaluation; the rest
    cost nothing. The predictor is retrained on every real evaluation every
    ``retrain_every`` evaluations.
    """

    name = "gpnas"

    def __init__(
        self,
        oracle: Oracle,
        rng: np.random.Generator,
        config: Optional[EngineConfig] = None,
        fixed_skip: Optional[SkipPattern] = None,
    ) -> None:
        config = config if config is not None else EngineConfig()
        if config.ladder.budgets != oracle.ladder.budgets:
            raise ValueError(
                f"engine ladder {list(config.ladder.budgets)} does not match oracle ladder {list(oracle.ladder.budgets)}"
            )
        bohb = BOHBSearcher(
            oracle.space,
            config.split,
            config.ladder,
            rng,
            alternate=config.alternate,
            blocker=config.blocker,
            fixed_skip=fixed_skip,
        )
        super().__init__(oracle, rng, bohb)
        self.config = config
        self.params = PredictorParams.initialize(config.train)
        self.trained = False
        self.filtered_out = 0
        self._queue: Deque[CellGraph] = deque()
        self._queue_bracket = -1

    @property
    def filter_active(self) -> bool:
        warmup = self.config.warmup_evals
        return warmup is not None and self.trained and len(self.trace) >= warmup

    def fresh_candidate(self, slot: Slot) -> CellGraph:
        if not self.filter_active:
            return self.bohb.sample_candidate()
        if slot.bracket_id != self._queue_bracket:
            self._queue.clear()
            self._queue_bracket = slot.bracket_id
        if not self._queue:
            pool = [self.bohb.sample_candidate() for _ in range(self.config.filter_pool)]
            ranked = rank_candidates(self.params, pool, self.config.ladder.index_of(slot.budget))
            keep = self.config.keep_per_pool
            self._queue.extend(cell for cell, _ in ranked[:keep])
            self.filtered_out += len(pool) - keep
            logger.debug(
                "filter kept %d of %d proposals (scores %.4f..%.4f)",
                keep, len(pool), ranked[0][1], ranked[keep - 1][1],
            )
        return self._queue.popleft()

    def step(self) -> Observation:
        observation = super().step()
        warmup = self.config.warmup_evals
        n = len(self.trace)
        if warmup is not None and n >= max(warmup, 1) and (n - warmup) % self.config.retrain_every == 0:
            self.retrain()
        return observation

    def retrain(self) -> List[float]:
        rows = self.bohb.pools.predictor_rows()
        if not rows:
            return []
        batch = observations_to_batch(rows, self.config.ladder)
        self.params, trace = train(self.params, batch, self.config.train)
        self.trained = True
        logger.info("predictor retrained on %d observations, loss %.6f", len(rows), trace[-1])
        return trace


def run_search(
    config: EngineConfig,
    oracle: Oracle,
    rng: np.random.Generator,
    max_cost: Optional[int] = None,
    max_evals: Optional[int] = None,
) -> Tuple[CellGraph, RegretTrace, PredictorParams]:
    """Run the filtered alternating search; returns the incumbent, its trace and the predictor."""
    searcher = GPNASSearcher(oracle, rng, config)
    trace = searcher.run(max_cost=max_cost, max_evals=max_evals)
    if trace.incumbent is None:
        raise ValueError("search ended before any evaluation")
    logger.info(
        "search done: %d evaluations, %d epochs, %d proposals filtered out, best %.4f",
        len(trace), trace.cum_epochs, searcher.filtered_out, trace.best_val_acc,
    )
    return trace.incumbent, trace, searcher.params


@dataclass(frozen=True)
class StabilityRow:
    graph_id: int
    skip_bits: str
    avg_error: float
    top_error: float

    @property
    def gap(self) -> float:
        return self.avg_error - self.top_error


def run_stability_study(
    fixed_graphs: Sequence[SkipPattern],
    config: EngineConfig,
    oracle: Oracle,
    rng: np.random.Generator,
    evals_per_graph: int = 60,
    n_samples: int = 64,
) -> List[StabilityRow]:
    """Operator-only search on each fixed skip pattern.

    ``avg_error`` is one minus the mean predicted accuracy (largest budget)
    over ``n_samples`` random operator assignments; ``top_error`` is one minus
    the best accuracy actually observed. Each graph trains its own predictor
    on the evaluations of its run.
    """
    if evals_per_graph < 1 or n_samples < 1:
        raise ValueError("evals_per_graph and n_samples must be >= 1")
    rows: List[StabilityRow] = []
    top_level = len(config.ladder.budgets) - 1
    for graph_id, skip in enumerate(fixed_graphs):
        if skip.n_nodes != oracle.space.n_nodes:
            raise ValueError(f"graph {graph_id} has {skip.n_nodes} nodes, oracle expects {oracle.space.n_nodes}")
        searcher = GPNASSearcher(oracle, rng, config, fixed_skip=skip)
        trace = searcher.run(max_evals=evals_per_graph)
        if not searcher.trained:
            searcher.retrain()
        samples = [CellGraph(skip, oracle.space.sample_ops(rng)) for _ in range(n_samples)]
        predicted = predict(searcher.params, samples, top_level)
        row = StabilityRow(graph_id, skip.bits, float(1.0 - predicted.mean()), float(1.0 - trace.best_val_acc))
        logger.info(
            "graph %d (%s): avg error %.4f, top error %.4f", graph_id, skip.bits, row.avg_error, row.top_error,
        )
        rows.append(row)
    return rows
