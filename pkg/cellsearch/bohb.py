"""Hyperband budget scheduling around the TPE proposer, with sub-space alternation.

A :class:`Bracket` is one successive-halving run: a base rung of fresh
configurations at a small budget, then the top ``1/eta`` promoted to each
larger budget. :class:`HyperbandScheduler` cycles brackets from the most
aggressive to plain full-budget evaluation. :class:`BOHBSearcher` fills the
fresh slots with TPE proposals, alternating between the skip-connection and
operator sub-spaces once per bracket.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import BracketExhausted, RungPending
from .logger import get_logger
from .search_space import (
    CellGraph,
    DropBlocker,
    GeneralizedOp,
    SearchSpace,
    SkipPattern,
    apply_drop_blocker,
)
from .tpe import CellSubspace, Observation, OpSubspace, SkipSubspace, SplitSpec, propose

logger = get_logger(__name__)


@dataclass(frozen=True)
class BudgetLadder:
    """Geometric epoch ladder ``min_budget * eta**k`` capped at ``max_budget``."""

    min_budget: int = 4
    max_budget: int = 108
    eta: int = 3

    def __post_init__(self) -> None:
        if self.min_budget < 1:
            raise ValueError(f"min_budget: must be >= 1 (value: {self.min_budget})")
        if self.max_budget < self.min_budget:
            raise ValueError(f"max_budget: must be >= min_budget (value: {self.max_budget})")
        if self.eta < 2:
            raise ValueError(f"eta: must be >= 2 (value: {self.eta})")

    @property
    def budgets(self) -> Tuple[int, ...]:
        levels = []
        budget = self.min_budget
        while budget < self.max_budget:
            levels.append(budget)
            budget *= self.eta
        levels.append(self.max_budget)
        return tuple(levels)

    @property
    def s_max(self) -> int:
        return len(self.budgets) - 1

    def index_of(self, budget: int) -> int:
        try:
            return self.budgets.index(budget)
        except ValueError:
            raise ValueError(f"budget {budget} is not in ladder {list(self.budgets)}") from None

    def __contains__(self, budget: object) -> bool:
        return budget in self.budgets


@dataclass(frozen=True)
class Slot:
    """One evaluation to perform: a fresh configuration (``config is None``) or a promoted one."""

    bracket_id: int
    rung: int
    budget: int
    config: Optional[CellGraph] = None

    @property
    def is_fresh(self) -> bool:
        return self.config is None


class Bracket:
    """Successive-halving bookkeeping for one bracket.

    Promotion to rung ``k + 1`` happens only once every slot of rung ``k`` has
    reported; survivors are the highest accuracies, earlier timestamps first on ties.
    """

    def __init__(self, rungs: Sequence[Tuple[int, int]], bracket_id: int = 0) -> None:
        if not rungs:
            raise ValueError("a bracket needs at least one rung")
        self.rungs: List[Tuple[int, int]] = [(int(b), int(c)) for b, c in rungs]
        for budget, capacity in self.rungs:
            if budget < 1 or capacity < 1:
                raise ValueError(f"rung budget and capacity must be >= 1 (value: {(budget, capacity)})")
        self.bracket_id = bracket_id
        self._issued = [0] * len(self.rungs)
        self._results: List[List[Tuple[CellGraph, float, int]]] = [[] for _ in self.rungs]
        self._promoted: List[List[CellGraph]] = [[] for _ in self.rungs]
        self._charged = 0

    @classmethod
    def successive_halving(
        cls, base_capacity: int, budgets: Sequence[int], eta: int, bracket_id: int = 0
    ) -> "Bracket":
        rungs = []
        capacity = base_capacity
        for budget in budgets:
            if capacity < 1:
                break
            rungs.append((budget, capacity))
            capacity //= eta
        return cls(rungs, bracket_id)

    @property
    def charged_epochs(self) -> int:
        return self._charged

    @property
    def planned_epochs(self) -> int:
        return sum(budget * capacity for budget, capacity in self.rungs)

    @property
    def is_exhausted(self) -> bool:
        return all(len(self._results[r]) == cap for r, (_, cap) in enumerate(self.rungs))

    def survivors(self, rung: int) -> List[Tuple[CellGraph, float]]:
        return [(config, acc) for config, acc, _ in self._results[rung]]

    def promotions(self, rung: int) -> List[CellGraph]:
        """Configurations promoted out of ``rung`` (empty until the rung completes)."""
        return list(self._promoted[rung + 1]) if rung + 1 < len(self.rungs) else []

    def _current_rung(self) -> int:
        for r, (_, cap) in enumerate(self.rungs):
            if len(self._results[r]) < cap:
                return r
        raise BracketExhausted(f"bracket {self.bracket_id} is exhausted")

    def next_slot(self) -> Slot:
        rung = self._current_rung()
        budget, capacity = self.rungs[rung]
        issued = self._issued[rung]
        if issued >= capacity:
            raise RungPending(f"rung {rung} of bracket {self.bracket_id} awaits {capacity - len(self._results[rung])} results")
        self._issued[rung] += 1
        config = None if rung == 0 else self._promoted[rung][issued]
        return Slot(self.bracket_id, rung, budget, config)

    def report(self, slot: Slot, config: CellGraph, accuracy: float, timestamp: int) -> None:
        if slot.bracket_id != self.bracket_id:
            raise ValueError(f"slot belongs to bracket {slot.bracket_id}, not {self.bracket_id}")
        rung = slot.rung
        budget, capacity = self.rungs[rung]
        if len(self._results[rung]) >= capacity:
            raise ValueError(f"rung {rung} of bracket {self.bracket_id} already has all its results")
        self._results[rung].append((config, float(accuracy), int(timestamp)))
        self._charged += budget
        if len(self._results[rung]) == capacity and rung + 1 < len(self.rungs):
            keep = self.rungs[rung + 1][1]
            ranked = sorted(self._results[rung], key=lambda item: (-item[1], item[2]))
            self._promoted[rung + 1] = [config for config, _, _ in ranked[:keep]]
            logger.debug(
                "bracket %d: rung %d complete, promoting %d to budget %d",
                self.bracket_id, rung, keep, self.rungs[rung + 1][0],
            )


def next_budget_assignment(bracket: Bracket) -> Slot:
    """Next evaluation slot of ``bracket``; raises :class:`BracketExhausted` at the end."""
    return bracket.next_slot()


class HyperbandScheduler:
    """Cycles Hyperband brackets ``s = s_max, ..., 0`` over a budget ladder."""

    def __init__(self, ladder: BudgetLadder) -> None:
        self.ladder = ladder
        self._count = 0

    def bracket_rungs(self, s: int) -> List[Tuple[int, int]]:
        s_max = self.ladder.s_max
        eta = self.ladder.eta
        n = -(-(s_max + 1) * eta ** s // (s + 1))
        budgets = self.ladder.budgets[s_max - s:]
        return [(budget, n // eta ** i) for i, budget in enumerate(budgets)]

    def new_bracket(self) -> Bracket:
        s = self.ladder.s_max - (self._count % (self.ladder.s_max + 1))
        bracket = Bracket(self.bracket_rungs(s), bracket_id=self._count)
        self._count += 1
        logger.debug("opened bracket %d (s=%d): %s", bracket.bracket_id, s, bracket.rungs)
        return bracket


class Phase(str, Enum):
    SKIP = "skip"
    OP = "op"


@dataclass(frozen=True)
class AlternationState:
    """Which sub-space is searched now, and the incumbent values the other one is held at."""

    phase: Phase = Phase.SKIP
    fixed_skip: Optional[SkipPattern] = None
    fixed_ops: Optional[Tuple[GeneralizedOp, ...]] = None
    step: int = 0
    blocker: Optional[DropBlocker] = DropBlocker()
    locked: bool = False

    def advanced(self) -> "AlternationState":
        blocker = self.blocker.advanced() if self.blocker is not None else None
        return replace(self, step=self.step + 1, blocker=blocker)

    def switched(self, incumbent: Optional[CellGraph]) -> "AlternationState":
        """Flip the searched sub-space and hold the other one at ``incumbent``."""
        if self.locked:
            return self
        if self.phase is Phase.SKIP:
            fixed_skip = incumbent.skip if incumbent is not None else self.fixed_skip
            return replace(self, phase=Phase.OP, fixed_skip=fixed_skip)
        fixed_ops = incumbent.ops if incumbent is not None else self.fixed_ops
        return replace(self, phase=Phase.SKIP, fixed_ops=fixed_ops)


class SearchPools:
    """Shared observation pool with per-sub-space projections and the predictor training rows.

    Writes are serialized behind a lock; readers work on immutable snapshots.
    """

    def __init__(self, space: SearchSpace) -> None:
        self.space = space
        self.skip_subspace = SkipSubspace(space)
        self.op_subspace = OpSubspace(space)
        self.cell_subspace = CellSubspace(space)
        self._observations: List[Observation] = []
        self._predictor_rows: List[Observation] = []
        self._incumbent: Optional[Observation] = None
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._observations)

    def snapshot(self) -> Tuple[Observation, ...]:
        with self._lock:
            return tuple(self._observations)

    def predictor_rows(self) -> Tuple[Observation, ...]:
        with self._lock:
            return tuple(self._predictor_rows)

    @property
    def incumbent(self) -> Optional[Observation]:
        return self._incumbent

    def append(self, config: CellGraph, budget: int, accuracy: float) -> Observation:
        with self._lock:
            observation = Observation(config, int(budget), float(accuracy), timestamp=len(self._observations))
            self._observations.append(observation)
            self._predictor_rows.append(observation)
            current = self._incumbent
            if current is None or (observation.budget, observation.accuracy) > (current.budget, current.accuracy):
                self._incumbent = observation
            return observation


def record_result(pools: SearchPools, config: CellGraph, budget: int, accuracy: float) -> Observation:
    """Feed one evaluation back into the TPE pools and the predictor training set."""
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy: must be in [0, 1] (value: {accuracy})")
    return pools.append(config, budget, accuracy)


def alternate_sample(
    state: AlternationState,
    pools: SearchPools,
    spec: SplitSpec,
    rng: np.random.Generator,
) -> Tuple[SkipPattern, Tuple[GeneralizedOp, ...]]:
    """Propose a child model: the searched sub-space from TPE, the other from its incumbent.

    The skip sub-space is handled first, then the operator sub-space. A
    sub-space without an incumbent yet is proposed as well. Freshly proposed
    skip patterns pass through the drop blocker.
    """
    snapshot = pools.snapshot()

    if state.phase is Phase.OP and state.fixed_skip is not None:
        skip = state.fixed_skip
    else:
        skip = propose(snapshot, spec, pools.skip_subspace, rng)
        if state.blocker is not None:
            skip = apply_drop_blocker(skip, state.blocker, rng)

    if state.phase is Phase.SKIP and state.fixed_ops is not None:
        ops = state.fixed_ops
    else:
        ops = propose(snapshot, spec, pools.op_subspace, rng)
    return skip, tuple(ops)


class BOHBSearcher:
    """Hyperband-scheduled TPE sampling, alternating or joint over the cell space.

    The searcher hands out :class:`Slot` objects; the caller evaluates them and
    reports back through :meth:`report`. Fresh slots are filled by
    :meth:`sample_candidate`.
    """

    def __init__(
        self,
        space: SearchSpace,
        spec: SplitSpec,
        ladder: BudgetLadder,
        rng: np.random.Generator,
        *,
        alternate: bool = True,
        blocker: Optional[DropBlocker] = DropBlocker(),
        fixed_skip: Optional[SkipPattern] = None,
    ) -> None:
        self.space = space
        self.spec = spec
        self.ladder = ladder
        self.rng = rng
        self.alternate = alternate
        self.pools = SearchPools(space)
        self.scheduler = HyperbandScheduler(ladder)
        self.bracket = self.scheduler.new_bracket()
        if fixed_skip is not None:
            self.state = AlternationState(phase=Phase.OP, fixed_skip=fixed_skip, blocker=None, locked=True)
        else:
            self.state = AlternationState(blocker=blocker)
        self._charged_closed = 0

    @property
    def charged_epochs(self) -> int:
        return self._charged_closed + self.bracket.charged_epochs

    def next_slot(self) -> Slot:
        try:
            return next_budget_assignment(self.bracket)
        except BracketExhausted:
            self._close_bracket()
            return next_budget_assignment(self.bracket)

    def _close_bracket(self) -> None:
        self._charged_closed += self.bracket.charged_epochs
        if self.alternate:
            incumbent = self.pools.incumbent
            self.state = self.state.switched(incumbent.config if incumbent is not None else None)
            logger.debug("bracket %d closed, now searching %s", self.bracket.bracket_id, self.state.phase.value)
        self.bracket = self.scheduler.new_bracket()

    def sample_candidate(self) -> CellGraph:
        if not self.alternate:
            return propose(self.pools.snapshot(), self.spec, self.pools.cell_subspace, self.rng)
        skip, ops = alternate_sample(self.state, self.pools, self.spec, self.rng)
        self.state = self.state.advanced()
        return CellGraph(skip, ops)

    def report(self, slot: Slot, config: CellGraph, accuracy: float) -> Observation:
        observation = record_result(self.pools, config, slot.budget, accuracy)
        self.bracket.report(slot, config, accuracy, observation.timestamp)
        return observation


__all__ = [
    "AlternationState",
    "BOHBSearcher",
    "Bracket",
    "BudgetLadder",
    "HyperbandScheduler",
    "Phase",
    "SearchPools",
    "Slot",
    "alternate_sample",
    "next_budget_assignment",
    "record_result",
]
