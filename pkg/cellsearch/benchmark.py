"""Evaluation oracles: a deterministic synthetic benchmark and record-file lookups.

Record file format (one cell per line, ``#`` comments and blank lines ignored)::

    <cell-encoding> TAB <budget>=<acc>;<budget>=<acc>;... TAB <test_acc>

Accuracies are written with ``repr`` so a write/load round trip is exact.
"""
from __future__ import annotations

import hashlib
import math
import struct
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

from scipy.special import ndtri

from .bohb import BudgetLadder
from .exceptions import (
    BudgetNotInLadderError,
    InvalidCellError,
    RecordParseError,
    SpaceTooLargeError,
    UnknownCellError,
)
from .logger import get_logger
from .search_space import MAX_NODES, CellGraph, SearchSpace, decode_cell, encode_cell, triu_pairs

logger = get_logger(__name__)

EXHAUSTIVE_MAX_NODES = 5
EXHAUSTIVE_LIMIT = 250_000

_U64 = float(2 ** 64)


class Oracle(Protocol):
    """What every searcher needs from an evaluation backend."""

    space: SearchSpace
    ladder: BudgetLadder

    def query(self, cell: CellGraph, budget: int) -> float: ...

    def test_accuracy(self, cell: CellGraph) -> float: ...

    def global_optimum(self) -> Optional["BenchRecord"]: ...

    def table(self) -> List["BenchRecord"]: ...

    def describe(self) -> str: ...


@dataclass(frozen=True)
class OracleSpec:
    """Synthetic oracle parameters. ``op_choices`` sizes the evenly spread operator domain."""

    n_nodes: int = 4
    seed: int = 0
    noise_sd: float = 0.0
    ladder: BudgetLadder = field(default_factory=BudgetLadder)
    op_choices: int = 3

    def __post_init__(self) -> None:
        if not 2 <= self.n_nodes <= MAX_NODES:
            raise ValueError(f"n_nodes: must be in [2, {MAX_NODES}] (value: {self.n_nodes})")
        if self.noise_sd < 0.0 or not math.isfinite(self.noise_sd):
            raise ValueError(f"noise_sd: must be a finite value >= 0 (value: {self.noise_sd})")

    @property
    def space(self) -> SearchSpace:
        return SearchSpace.reduced(self.n_nodes, self.op_choices)

    @property
    def exhaustive(self) -> bool:
        return self.n_nodes <= EXHAUSTIVE_MAX_NODES and self.space.cardinality() <= EXHAUSTIVE_LIMIT

    def describe(self) -> str:
        return f"synth:n{self.n_nodes}:ops{self.op_choices}:noise{self.noise_sd:g}:seed{self.seed}"


@dataclass(frozen=True)
class BenchRecord:
    cell: CellGraph
    accuracies: Mapping[int, float]
    test_accuracy: float

    def __post_init__(self) -> None:
        for budget, acc in self.accuracies.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy at budget {budget}: must be in [0, 1] (value: {acc})")
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"test_accuracy: must be in [0, 1] (value: {self.test_accuracy})")

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[max(self.accuracies)]

    @property
    def encoding(self) -> str:
        return encode_cell(self.cell)


def cell_sort_key(cell: CellGraph) -> Tuple[int, str, Tuple[int, ...]]:
    """Canonical enumeration order: node count, edge bits, then operator indices."""
    return cell.n_nodes, cell.skip.bits, cell.op_indices


def _hash_unit(seed: int, *key: object) -> float:
    """Uniform value in (0, 1) derived from ``seed`` and ``key``; no global RNG involved."""
    digest = hashlib.blake2b(repr((seed,) + key).encode("utf-8"), digest_size=8).digest()
    (value,) = struct.unpack("<Q", digest)
    return (value + 0.5) / _U64


def _hash_normal(seed: int, *key: object) -> float:
    return float(ndtri(_hash_unit(seed, *key)))


@lru_cache(maxsize=1 << 17)
def _cell_profile(cell: CellGraph, seed: int) -> Tuple[float, float]:
    """Asymptotic accuracy and learning-curve time constant of ``cell``."""
    n = cell.n_nodes
    node_terms = []
    for position, g in enumerate(cell.ops):
        weight = 0.75 + 0.5 * _hash_unit(seed, "position", n, position)
        base = _hash_unit(seed, "op", g.op)
        act = _hash_unit(seed, "op-act", g.op, g.act)
        init = _hash_unit(seed, "op-init", g.op, g.init)
        node_terms.append(weight * (0.5 * base + 0.3 * act + 0.2 * init))
    node_score = sum(node_terms) / (1.5 * n)

    pairs = cell.skip.edge_pairs
    if pairs:
        edge_score = sum(
            _hash_unit(seed, "edge", *sorted((cell.ops[i].index, cell.ops[j].index))) for i, j in pairs
        ) / len(pairs)
    else:
        edge_score = 0.5
    density = cell.skip.edge_count / len(triu_pairs(n))
    target_density = 0.25 + 0.5 * _hash_unit(seed, "density", n)
    density_score = 1.0 - (density - target_density) ** 2

    score = 0.6 * node_score + 0.25 * edge_score + 0.15 * density_score
    a_max = 0.55 + 0.40 * min(max(score, 0.0), 1.0)
    tau = 4.0 + 16.0 * _hash_unit(seed, "tau", encode_cell(cell))
    return a_max, tau


def synth_accuracy(cell: CellGraph, budget: int, spec: OracleSpec) -> float:
    """Validation accuracy of ``cell`` after ``budget`` epochs on the synthetic benchmark.

    ``a_max * (1 - exp(-budget / tau))`` plus hash-seeded Gaussian noise,
    clamped to [0, 1]. The same arguments always give the same value.
    """
    if budget not in spec.ladder:
        raise BudgetNotInLadderError(budget, spec.ladder.budgets)
    if cell.n_nodes != spec.n_nodes:
        raise InvalidCellError(f"cell has {cell.n_nodes} nodes, oracle expects {spec.n_nodes}")
    a_max, tau = _cell_profile(cell, spec.seed)
    value = a_max * (1.0 - math.exp(-budget / tau))
    if spec.noise_sd > 0.0:
        value += spec.noise_sd * _hash_normal(spec.seed, "noise", encode_cell(cell), budget)
    return min(max(value, 0.0), 1.0)


def synth_test_accuracy(cell: CellGraph, spec: OracleSpec) -> float:
    a_max, tau = _cell_profile(cell, spec.seed)
    value = a_max * (1.0 - math.exp(-spec.ladder.max_budget / tau)) - 0.005
    if spec.noise_sd > 0.0:
        value += spec.noise_sd * _hash_normal(spec.seed, "test", encode_cell(cell))
    return min(max(value, 0.0), 1.0)


def _best_record(records: Iterable[BenchRecord]) -> Optional[BenchRecord]:
    best: Optional[BenchRecord] = None
    for record in sorted(records, key=lambda r: cell_sort_key(r.cell)):
        if best is None or record.final_accuracy > best.final_accuracy:
            best = record
    return best


def enumerate_space(spec: OracleSpec, limit: int = EXHAUSTIVE_LIMIT) -> List[BenchRecord]:
    """Every cell of the oracle's space with its full per-budget accuracy map."""
    space = spec.space
    cardinality = space.cardinality()
    if spec.n_nodes > EXHAUSTIVE_MAX_NODES or cardinality > limit:
        raise SpaceTooLargeError(cardinality, limit)
    records = [
        BenchRecord(
            cell,
            {b: synth_accuracy(cell, b, spec) for b in spec.ladder.budgets},
            synth_test_accuracy(cell, spec),
        )
        for cell in space.enumerate_cells()
    ]
    logger.info("enumerated %d cells for %s", len(records), spec.describe())
    return records


class SyntheticOracle:
    """Oracle backed by :func:`synth_accuracy`; immutable and safe to query from many threads."""

    def __init__(self, spec: OracleSpec) -> None:
        self.spec = spec
        self.space = spec.space
        self.ladder = spec.ladder
        self._lock = threading.Lock()
        self._table: Optional[List[BenchRecord]] = None

    def query(self, cell: CellGraph, budget: int) -> float:
        return synth_accuracy(cell, budget, self.spec)

    def test_accuracy(self, cell: CellGraph) -> float:
        return synth_test_accuracy(cell, self.spec)

    def table(self) -> List[BenchRecord]:
        with self._lock:
            if self._table is None:
                self._table = enumerate_space(self.spec)
            return self._table

    def global_optimum(self) -> Optional[BenchRecord]:
        """Best cell at the largest budget, or ``None`` when the space is not enumerable."""
        if not self.spec.exhaustive:
            return None
        return _best_record(self.table())

    def describe(self) -> str:
        return self.spec.describe()


class RecordOracle:
    """Lookup oracle over a fixed set of :class:`BenchRecord` rows."""

    def __init__(self, records: Sequence[BenchRecord], source: str = "records") -> None:
        if not records:
            raise ValueError("a record oracle needs at least one record")
        budgets = tuple(sorted(records[0].accuracies))
        self.ladder = _ladder_for(budgets)
        n_nodes = records[0].cell.n_nodes
        self._records: Dict[CellGraph, BenchRecord] = {}
        for record in records:
            if tuple(sorted(record.accuracies)) != budgets:
                raise ValueError(f"record {record.encoding} does not cover budgets {list(budgets)}")
            if record.cell.n_nodes != n_nodes:
                raise ValueError(f"record {record.encoding} has {record.cell.n_nodes} nodes, expected {n_nodes}")
            self._records[record.cell] = record
        self.space = SearchSpace(n_nodes, tuple({g for r in records for g in r.cell.ops}))
        self.source = source

    def __len__(self) -> int:
        return len(self._records)

    def record(self, cell: CellGraph) -> BenchRecord:
        try:
            return self._records[cell]
        except KeyError:
            raise UnknownCellError(f"no record for cell {encode_cell(cell)}") from None

    def query(self, cell: CellGraph, budget: int) -> float:
        if budget not in self.ladder:
            raise BudgetNotInLadderError(budget, self.ladder.budgets)
        return self.record(cell).accuracies[budget]

    def test_accuracy(self, cell: CellGraph) -> float:
        return self.record(cell).test_accuracy

    def table(self) -> List[BenchRecord]:
        return list(self._records.values())

    def global_optimum(self) -> Optional[BenchRecord]:
        return _best_record(self._records.values())

    def describe(self) -> str:
        return f"file:{self.source}"


def _ladder_for(budgets: Tuple[int, ...]) -> BudgetLadder:
    eta = budgets[1] // budgets[0] if len(budgets) > 1 else 3
    try:
        ladder = BudgetLadder(budgets[0], budgets[-1], max(eta, 2))
    except ValueError as error:
        raise ValueError(f"budgets {list(budgets)} do not form a ladder: {error}") from None
    if ladder.budgets != budgets:
        raise ValueError(f"budgets {list(budgets)} do not form a geometric ladder")
    return ladder


def format_record(record: BenchRecord) -> str:
    accs = ";".join(f"{b}={record.accuracies[b]!r}" for b in sorted(record.accuracies))
    return f"{record.encoding}\t{accs}\t{record.test_accuracy!r}"


def write_records(records: Iterable[BenchRecord], path: Union[str, Path], header: Optional[str] = None) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if header:
            f.write(f"# {header}\n")
        for record in records:
            f.write(format_record(record) + "\n")
            count += 1
    logger.info("wrote %d records to %s", count, path)
    return count


def parse_record_line(line: str, line_no: int, path: Optional[str] = None) -> BenchRecord:
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) != 3:
        raise RecordParseError(line_no, f"expected 3 tab-separated fields, got {len(fields)}", path)
    encoding, acc_text, test_text = fields
    try:
        cell = decode_cell(encoding)
    except InvalidCellError as error:
        raise RecordParseError(line_no, str(error), path) from None
    try:
        test = float(test_text)
    except ValueError:
        raise RecordParseError(line_no, f"malformed test accuracy {test_text!r}", path) from None
    accuracies: Dict[int, float] = {}
    for item in acc_text.split(";"):
        budget_text, sep, value_text = item.partition("=")
        try:
            if not sep:
                raise ValueError
            budget, value = int(budget_text), float(value_text)
        except ValueError:
            raise RecordParseError(line_no, f"malformed accuracy entry {item!r}", path) from None
        if budget in accuracies:
            raise RecordParseError(line_no, f"budget {budget} listed twice", path)
        accuracies[budget] = value
    try:
        return BenchRecord(cell, accuracies, test)
    except ValueError as error:
        raise RecordParseError(line_no, str(error), path) from None


def load_records(path: Union[str, Path]) -> RecordOracle:
    """Read a record file into a :class:`RecordOracle`."""
    path = Path(path)
    records: List[BenchRecord] = []
    seen: Dict[CellGraph, int] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            record = parse_record_line(line, line_no, str(path))
            if record.cell in seen:
                raise RecordParseError(line_no, f"cell already listed on line {seen[record.cell]}", str(path))
            if records and sorted(record.accuracies) != sorted(records[0].accuracies):
                raise RecordParseError(line_no, "budgets differ from the first record", str(path))
            seen[record.cell] = line_no
            records.append(record)
    if not records:
        raise RecordParseError(0, "file holds no records", str(path))
    try:
        oracle = RecordOracle(records, source=str(path))
    except ValueError as error:
        raise RecordParseError(0, str(error), str(path)) from None
    logger.info("loaded %d records from %s", len(records), path)
    return oracle
