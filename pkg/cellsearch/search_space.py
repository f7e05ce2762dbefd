"""Decoupled cell search space: skip-connection patterns and generalized operators.

A child model ("cell") is an undirected graph over ``n_nodes`` operator nodes.
The skip-connection domain holds its symmetric adjacency, the operator domain
holds one generalized operator (operator, activation, initialization) per node.

Canonical text form of a cell::

    n_nodes|upper-triangular-bits|op:act:init,op:act:init,...

The bit string lists adjacency[i][j] for i < j in row-major order
(``(0,1), (0,2), ..., (0,n-1), (1,2), ...``), ``1`` meaning connected.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .exceptions import InvalidCellError

OPERATORS: Tuple[str, ...] = (
    "identity",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "sep_conv_7x7",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "dil_conv_7x7",
    "max_pool_3x3",
    "max_pool_5x5",
    "avg_pool_3x3",
    "avg_pool_5x5",
    "conv_1x7_7x1",
    "conv_3x3",
)
ACTIVATIONS: Tuple[str, ...] = ("selu", "relu", "elu", "tanh")
INIT_METHODS: Tuple[str, ...] = ("uniform", "gauss", "gauss2")

N_GENERALIZED_OPS = len(OPERATORS) * len(ACTIVATIONS) * len(INIT_METHODS)

MIN_NODES = 2
MAX_NODES = 7
DEFAULT_NODES = 7
DEFAULT_SAMPLE_RETRIES = 1000


@lru_cache(maxsize=MAX_NODES)
def triu_pairs(n_nodes: int) -> Tuple[Tuple[int, int], ...]:
    """Upper-triangular (i, j) pairs, i < j, in canonical row-major order."""
    return tuple((i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes))


def check_node_count(n_nodes: int) -> None:
    if not MIN_NODES <= n_nodes <= MAX_NODES:
        raise InvalidCellError(f"n_nodes: must be in [{MIN_NODES}, {MAX_NODES}] (value: {n_nodes})")


@dataclass(frozen=True, order=True)
class GeneralizedOp:
    """One point of the operator x activation x initialization product space."""

    op: int
    act: int
    init: int

    def __post_init__(self) -> None:
        if not 0 <= self.op < len(OPERATORS):
            raise InvalidCellError(f"op: must be in [0, {len(OPERATORS) - 1}] (value: {self.op})")
        if not 0 <= self.act < len(ACTIVATIONS):
            raise InvalidCellError(f"act: must be in [0, {len(ACTIVATIONS) - 1}] (value: {self.act})")
        if not 0 <= self.init < len(INIT_METHODS):
            raise InvalidCellError(f"init: must be in [0, {len(INIT_METHODS) - 1}] (value: {self.init})")

    @property
    def index(self) -> int:
        """Position in the lexicographic enumeration of all 156 generalized operators."""
        return (self.op * len(ACTIVATIONS) + self.act) * len(INIT_METHODS) + self.init

    @classmethod
    def from_index(cls, index: int) -> "GeneralizedOp":
        if not 0 <= index < N_GENERALIZED_OPS:
            raise InvalidCellError(f"generalized op index out of range (value: {index})")
        rest, init = divmod(index, len(INIT_METHODS))
        op, act = divmod(rest, len(ACTIVATIONS))
        return cls(op, act, init)

    @property
    def label(self) -> str:
        return f"{OPERATORS[self.op]}/{ACTIVATIONS[self.act]}/{INIT_METHODS[self.init]}"

    def __str__(self) -> str:
        return f"{self.op}:{self.act}:{self.init}"


def enumerate_generalized_ops() -> List[GeneralizedOp]:
    """All 13 x 4 x 3 generalized operators in lexicographic (op, act, init) order."""
    return [
        GeneralizedOp(op, act, init)
        for op, act, init in itertools.product(
            range(len(OPERATORS)), range(len(ACTIVATIONS)), range(len(INIT_METHODS))
        )
    ]


def reduced_op_domain(k: int) -> Tuple[GeneralizedOp, ...]:
    """k generalized operators spread evenly through the full enumeration.

    Used to keep exhaustive oracles tractable; ``k = 156`` returns the full domain.
    """
    if not 1 <= k <= N_GENERALIZED_OPS:
        raise InvalidCellError(f"op_choices: must be in [1, {N_GENERALIZED_OPS}] (value: {k})")
    if k == 1:
        return (GeneralizedOp.from_index(0),)
    indices = sorted({round(i * (N_GENERALIZED_OPS - 1) / (k - 1)) for i in range(k)})
    return tuple(GeneralizedOp.from_index(i) for i in indices)


def _has_isolated_node(n_nodes: int, bits: Sequence[bool]) -> bool:
    degree = [0] * n_nodes
    for (i, j), bit in zip(triu_pairs(n_nodes), bits):
        if bit:
            degree[i] += 1
            degree[j] += 1
    return any(d == 0 for d in degree)


def is_valid_skip_bits(n_nodes: int, bits: Sequence[bool]) -> bool:
    """True when ``bits`` is a full upper triangle leaving no node disconnected."""
    if not 1 <= n_nodes <= MAX_NODES or len(bits) != len(triu_pairs(n_nodes)):
        return False
    if n_nodes == 1:
        return True
    return not _has_isolated_node(n_nodes, bits)


@dataclass(frozen=True)
class SkipPattern:
    """Symmetric, loop-free adjacency over the cell's nodes, stored as its upper triangle."""

    n_nodes: int
    edges: Tuple[bool, ...]

    def __post_init__(self) -> None:
        check_node_count(self.n_nodes)
        edges = tuple(bool(b) for b in self.edges)
        object.__setattr__(self, "edges", edges)
        expected = len(triu_pairs(self.n_nodes))
        if len(edges) != expected:
            raise InvalidCellError(f"edges: expected {expected} upper-triangular bits (value: {len(edges)})")
        if _has_isolated_node(self.n_nodes, edges):
            raise InvalidCellError(f"skip pattern leaves a node disconnected (degrees: {self.degrees})")

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "SkipPattern":
        matrix = np.asarray(adjacency).astype(bool)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise InvalidCellError(f"adjacency must be square (shape: {matrix.shape})")
        if not np.array_equal(matrix, matrix.T):
            raise InvalidCellError("adjacency must be symmetric")
        if matrix.diagonal().any():
            raise InvalidCellError("adjacency must have a zero diagonal")
        n_nodes = matrix.shape[0]
        return cls(n_nodes, tuple(bool(matrix[i, j]) for i, j in triu_pairs(n_nodes)))

    @property
    def adjacency(self) -> np.ndarray:
        matrix = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for (i, j), bit in zip(triu_pairs(self.n_nodes), self.edges):
            if bit:
                matrix[i, j] = matrix[j, i] = True
        return matrix

    @property
    def degrees(self) -> Tuple[int, ...]:
        degree = [0] * self.n_nodes
        for (i, j), bit in zip(triu_pairs(self.n_nodes), self.edges):
            if bit:
                degree[i] += 1
                degree[j] += 1
        return tuple(degree)

    @property
    def edge_count(self) -> int:
        return sum(self.edges)

    @property
    def edge_pairs(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(pair for pair, bit in zip(triu_pairs(self.n_nodes), self.edges) if bit)

    @property
    def bits(self) -> str:
        return "".join("1" if b else "0" for b in self.edges)

    def permuted(self, perm: Sequence[int]) -> "SkipPattern":
        """Relabel nodes so that old node ``perm[k]`` becomes new node ``k``."""
        order = np.asarray(perm)
        return SkipPattern.from_adjacency(self.adjacency[np.ix_(order, order)])


@dataclass(frozen=True)
class CellGraph:
    """A child-model configuration: skip pattern plus one generalized operator per node."""

    skip: SkipPattern
    ops: Tuple[GeneralizedOp, ...]

    def __post_init__(self) -> None:
        ops = tuple(self.ops)
        object.__setattr__(self, "ops", ops)
        if len(ops) != self.skip.n_nodes:
            raise InvalidCellError(f"ops: expected {self.skip.n_nodes} operators (value: {len(ops)})")

    @property
    def n_nodes(self) -> int:
        return self.skip.n_nodes

    @property
    def op_indices(self) -> Tuple[int, ...]:
        return tuple(g.index for g in self.ops)

    def permuted(self, perm: Sequence[int]) -> "CellGraph":
        return CellGraph(self.skip.permuted(perm), tuple(self.ops[k] for k in perm))

    def with_skip(self, skip: SkipPattern) -> "CellGraph":
        return replace(self, skip=skip)

    def with_ops(self, ops: Sequence[GeneralizedOp]) -> "CellGraph":
        return replace(self, ops=tuple(ops))

    def __str__(self) -> str:
        return encode_cell(self)


@dataclass(frozen=True)
class DropBlocker:
    """Decaying per-edge dropout applied to freshly sampled skip patterns."""

    rate0: float = 0.9
    decay: float = 0.98
    step: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate0 <= 1.0:
            raise InvalidCellError(f"rate0: must be in [0, 1] (value: {self.rate0})")
        if not 0.0 < self.decay <= 1.0:
            raise InvalidCellError(f"decay: must be in (0, 1] (value: {self.decay})")
        if self.step < 0:
            raise InvalidCellError(f"step: must be >= 0 (value: {self.step})")

    @property
    def rate(self) -> float:
        return self.rate0 * self.decay ** self.step

    def advanced(self, steps: int = 1) -> "DropBlocker":
        return replace(self, step=self.step + steps)


@dataclass(frozen=True)
class SearchSpace:
    """Cell size plus the generalized-operator domain the searchers draw from."""

    n_nodes: int = DEFAULT_NODES
    op_choices: Tuple[GeneralizedOp, ...] = field(default_factory=lambda: tuple(enumerate_generalized_ops()))

    def __post_init__(self) -> None:
        check_node_count(self.n_nodes)
        choices = tuple(sorted(set(self.op_choices)))
        if not choices:
            raise InvalidCellError("op_choices: must not be empty")
        object.__setattr__(self, "op_choices", choices)

    @classmethod
    def reduced(cls, n_nodes: int, k: int) -> "SearchSpace":
        return cls(n_nodes, reduced_op_domain(k))

    @property
    def n_edge_slots(self) -> int:
        return len(triu_pairs(self.n_nodes))

    @property
    def n_op_choices(self) -> int:
        return len(self.op_choices)

    def choice_index(self, op: GeneralizedOp) -> int:
        try:
            return self.op_choices.index(op)
        except ValueError:
            raise InvalidCellError(f"operator {op} is not in the search space domain") from None

    def contains(self, cell: CellGraph) -> bool:
        return cell.n_nodes == self.n_nodes and all(g in self.op_choices for g in cell.ops)

    def sample_skip(self, rng: np.random.Generator) -> SkipPattern:
        return sample_skip_pattern(self.n_nodes, rng)

    def sample_ops(self, rng: np.random.Generator) -> Tuple[GeneralizedOp, ...]:
        picks = rng.integers(0, len(self.op_choices), size=self.n_nodes)
        return tuple(self.op_choices[int(k)] for k in picks)

    def sample_cell(self, rng: np.random.Generator) -> CellGraph:
        skip = self.sample_skip(rng)
        return CellGraph(skip, self.sample_ops(rng))

    def skip_patterns(self) -> List[SkipPattern]:
        return enumerate_skip_patterns(self.n_nodes)

    def cardinality(self) -> int:
        return count_skip_patterns(self.n_nodes) * len(self.op_choices) ** self.n_nodes

    def enumerate_cells(self) -> Iterator[CellGraph]:
        for skip in self.skip_patterns():
            for ops in itertools.product(self.op_choices, repeat=self.n_nodes):
                yield CellGraph(skip, ops)


def sample_skip_pattern(
    n_nodes: int,
    rng: np.random.Generator,
    max_retries: int = DEFAULT_SAMPLE_RETRIES,
) -> SkipPattern:
    """Uniform draw over connected-degree patterns: fair coin per edge, resample on isolated nodes."""
    check_node_count(n_nodes)
    n_slots = len(triu_pairs(n_nodes))
    for _ in range(max_retries):
        bits = rng.random(n_slots) < 0.5
        if not _has_isolated_node(n_nodes, bits):
            return SkipPattern(n_nodes, tuple(bool(b) for b in bits))
    raise InvalidCellError(f"no valid skip pattern for {n_nodes} nodes after {max_retries} draws")


def count_skip_patterns(n_nodes: int) -> int:
    """Number of valid skip patterns (labelled graphs without isolated nodes), by inclusion-exclusion."""
    return sum(
        (-1) ** k * math.comb(n_nodes, k) * 2 ** math.comb(n_nodes - k, 2)
        for k in range(n_nodes + 1)
    )


@lru_cache(maxsize=MAX_NODES)
def _skip_patterns_cached(n_nodes: int) -> Tuple[SkipPattern, ...]:
    n_slots = len(triu_pairs(n_nodes))
    patterns = []
    for bits in itertools.product((False, True), repeat=n_slots):
        if not _has_isolated_node(n_nodes, bits):
            patterns.append(SkipPattern(n_nodes, bits))
    return tuple(patterns)


def enumerate_skip_patterns(n_nodes: int) -> List[SkipPattern]:
    """Every valid skip pattern at ``n_nodes``, ordered by canonical bit string."""
    check_node_count(n_nodes)
    return list(_skip_patterns_cached(n_nodes))


def apply_drop_blocker(pattern: SkipPattern, blocker: DropBlocker, rng: np.random.Generator) -> SkipPattern:
    """Drop each existing edge with the blocker's current rate, keeping every node connected.

    One uniform draw is consumed per existing edge regardless of the rate. A node
    left without edges gets back the last removed edge incident to it.
    """
    rate = blocker.rate
    edges = list(pattern.edges)
    pairs = triu_pairs(pattern.n_nodes)
    removed: List[int] = []
    for slot, bit in enumerate(pattern.edges):
        if bit and rng.random() < rate:
            edges[slot] = False
            removed.append(slot)

    if removed:
        degree = [0] * pattern.n_nodes
        for (i, j), bit in zip(pairs, edges):
            if bit:
                degree[i] += 1
                degree[j] += 1
        for node in range(pattern.n_nodes):
            if degree[node]:
                continue
            for slot in reversed(removed):
                i, j = pairs[slot]
                if node in (i, j):
                    edges[slot] = True
                    degree[i] += 1
                    degree[j] += 1
                    break
    return SkipPattern(pattern.n_nodes, tuple(edges))


def encode_cell(cell: CellGraph) -> str:
    """Canonical single-line text form, see the module docstring."""
    ops = ",".join(str(g) for g in cell.ops)
    return f"{cell.n_nodes}|{cell.skip.bits}|{ops}"


def decode_cell(text: str) -> CellGraph:
    """Inverse of :func:`encode_cell`; raises :class:`InvalidCellError` on malformed input."""
    parts = text.strip().split("|")
    if len(parts) != 3:
        raise InvalidCellError(f"cell encoding needs 3 '|'-separated fields: {text!r}")
    n_text, bits, ops_text = parts
    try:
        n_nodes = int(n_text)
    except ValueError:
        raise InvalidCellError(f"bad node count in cell encoding: {text!r}") from None
    check_node_count(n_nodes)
    if len(bits) != len(triu_pairs(n_nodes)) or set(bits) - {"0", "1"}:
        raise InvalidCellError(f"bad edge bits in cell encoding: {text!r}")
    ops: List[GeneralizedOp] = []
    for token in ops_text.split(","):
        fields = token.split(":")
        if len(fields) != 3:
            raise InvalidCellError(f"bad operator token {token!r} in cell encoding")
        try:
            ops.append(GeneralizedOp(*(int(f) for f in fields)))
        except ValueError as error:
            if isinstance(error, InvalidCellError):
                raise
            raise InvalidCellError(f"bad operator token {token!r} in cell encoding") from None
    skip = SkipPattern(n_nodes, tuple(b == "1" for b in bits))
    return CellGraph(skip, tuple(ops))
