"""Exception hierarchy shared by every cellsearch module."""
from __future__ import annotations

from typing import List, Optional


class CellSearchError(Exception):
    """Base class for all errors raised by cellsearch."""


class InvalidCellError(CellSearchError, ValueError):
    """A cell, skip pattern or encoding violates the search-space invariants."""


class PoolTooSmallError(CellSearchError):
    """The observation pool at a budget is too small to fit the density pair."""

    def __init__(self, budget: int, size: int, required: int) -> None:
        super().__init__(f"pool at budget {budget} has {size} observations, need at least {required}")
        self.budget = budget
        self.size = size
        self.required = required


class BracketExhausted(CellSearchError):
    """Every rung of a successive-halving bracket has been evaluated."""


class RungPending(CellSearchError):
    """All slots of the current rung are issued but not every result has been reported."""


class OracleError(CellSearchError):
    """Base class for evaluation-oracle failures."""


class BudgetNotInLadderError(OracleError, ValueError):
    """A query used a budget that is not a rung of the oracle's ladder."""

    def __init__(self, budget: int, ladder: tuple) -> None:
        super().__init__(f"budget {budget} is not in ladder {list(ladder)}")
        self.budget = budget


class UnknownCellError(OracleError, KeyError):
    """A record-backed oracle has no entry for the queried cell."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown cell"


class RecordParseError(OracleError, ValueError):
    """A benchmark record file could not be parsed."""

    def __init__(self, line_no: int, message: str, path: Optional[str] = None) -> None:
        where = f"{path}:{line_no}" if path else f"line {line_no}"
        super().__init__(f"{where}: {message}")
        self.line_no = line_no


class SpaceTooLargeError(OracleError):
    """Exhaustive enumeration was requested for a space that is too large."""

    def __init__(self, cardinality: int, limit: int) -> None:
        super().__init__(f"space has {cardinality} cells, exhaustive limit is {limit}")
        self.cardinality = cardinality
        self.limit = limit


class PredictorDivergedError(CellSearchError):
    """Predictor training produced a non-finite loss."""

    def __init__(self, epoch: int, last_finite_loss: Optional[float]) -> None:
        super().__init__(
            f"predictor loss became non-finite at epoch {epoch} (last finite loss: {last_finite_loss}); "
            "lower predictor.learning_rate"
        )
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


class ConfigError(CellSearchError, ValueError):
    """Configuration file or value failed validation."""

    def __init__(self, errors: List[str]) -> None:
        super().__init__("; ".join(errors))
        self.errors = list(errors)
