"""Search history store using SQLite."""
from __future__ import annotations

import csv
import sqlite3
from contextlib import closing, contextmanager
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Union

from .engine import RegretTrace
from .logger import get_logger

logger = get_logger(__name__)


class HistoryManager:
    """Persists every evaluation of every recorded search run."""

    def __init__(self, db_file: Union[str, Path] = "cellsearch_history.db") -> None:
        self.db_file = Path(db_file)
        self.db_file.parent.mkdir(parents=True, exist_ok=True)
        self._init_database()

    @contextmanager
    def _connect(self) -> Iterator[sqlite3.Connection]:
        with closing(sqlite3.connect(self.db_file, timeout=5)) as conn:
            with conn:
                yield conn

    def _init_database(self) -> None:
        with self._connect() as conn:
            cursor = conn.cursor()

            cursor.execute("PRAGMA journal_mode=WAL")
            cursor.execute("PRAGMA synchronous=NORMAL")

            cursor.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    created DATETIME DEFAULT CURRENT_TIMESTAMP,
                    algorithm TEXT NOT NULL,
                    oracle TEXT NOT NULL,
                    seed INTEGER
                )
            """)

            cursor.execute("""
                CREATE TABLE IF NOT EXISTS observations (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER NOT NULL REFERENCES runs(id),
                    step INTEGER NOT NULL,
                    cell TEXT NOT NULL,
                    budget INTEGER NOT NULL,
                    val_accuracy REAL NOT NULL,
                    test_accuracy REAL,
                    cum_epochs INTEGER NOT NULL
                )
            """)

            cursor.execute("""
                CREATE INDEX IF NOT EXISTS idx_observations_run
                ON observations(run_id, step)
            """)
        logger.debug("history database initialized: %s", self.db_file)

    def start_run(self, algorithm: str, oracle: str, seed: Optional[int] = None) -> Optional[int]:
        """Register a run and return its id."""
        try:
            with self._connect() as conn:
                cursor = conn.execute(
                    "INSERT INTO runs (algorithm, oracle, seed) VALUES (?, ?, ?)",
                    (algorithm, oracle, seed),
                )
                return int(cursor.lastrowid)
        except sqlite3.Error as e:
            logger.error("failed to start run: %s", e)
            return None

    def add_observation(
        self,
        run_id: int,
        step: int,
        cell: str,
        budget: int,
        val_accuracy: float,
        cum_epochs: int,
        test_accuracy: Optional[float] = None,
    ) -> bool:
        try:
            with self._connect() as conn:
                conn.execute(
                    """
                    INSERT INTO observations
                    (run_id, step, cell, budget, val_accuracy, test_accuracy, cum_epochs)
                    VALUES (?, ?, ?, ?, ?, ?, ?)
                    """,
                    (run_id, step, cell, budget, val_accuracy, test_accuracy, cum_epochs),
                )
                return True
        except sqlite3.Error as e:
            logger.error("failed to add observation: %s", e)
            return False

    def add_trace(
        self,
        run_id: int,
        trace: RegretTrace,
        test_accuracy: Optional[Callable[[str], float]] = None,
    ) -> int:
        """Store every step of a :class:`~cellsearch.engine.RegretTrace` in one transaction."""
        rows = [
            (
                run_id, i, s.cell, s.budget, s.val_acc,
                None if test_accuracy is None else test_accuracy(s.cell), s.cum_epochs,
            )
            for i, s in enumerate(trace.steps, start=1)
        ]
        try:
            with self._connect() as conn:
                conn.executemany(
                    """
                    INSERT INTO observations
                    (run_id, step, cell, budget, val_accuracy, test_accuracy, cum_epochs)
                    VALUES (?, ?, ?, ?, ?, ?, ?)
                    """,
                    rows,
                )
            return len(rows)
        except sqlite3.Error as e:
            logger.error("failed to store trace: %s", e)
            return 0

    def get_observations(self, run_id: int) -> List[dict]:
        try:
            with self._connect() as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.execute(
                    """
                    SELECT step, cell, budget, val_accuracy, test_accuracy, cum_epochs
                    FROM observations
                    WHERE run_id = ?
                    ORDER BY step
                    """,
                    (run_id,),
                )
                return [dict(row) for row in cursor.fetchall()]
        except sqlite3.Error as e:
            logger.error("failed to read observations: %s", e)
            return []

    def best_observations(self, limit: int = 10) -> List[dict]:
        """Highest validation accuracies across all runs."""
        try:
            with self._connect() as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.execute(
                    """
                    SELECT r.algorithm, o.run_id, o.step, o.cell, o.budget, o.val_accuracy, o.test_accuracy
                    FROM observations o JOIN runs r ON r.id = o.run_id
                    ORDER BY o.val_accuracy DESC, o.run_id, o.step
                    LIMIT ?
                    """,
                    (limit,),
                )
                return [dict(row) for row in cursor.fetchall()]
        except sqlite3.Error as e:
            logger.error("failed to read best observations: %s", e)
            return []

    def get_statistics(self) -> dict:
        try:
            with self._connect() as conn:
                runs = conn.execute("SELECT COUNT(*) FROM runs").fetchone()[0]
                totals = conn.execute(
                    "SELECT COUNT(*), COUNT(DISTINCT cell), SUM(budget), MAX(val_accuracy) FROM observations"
                ).fetchone()
                per_algorithm = conn.execute(
                    """
                    SELECT r.algorithm, COUNT(o.id)
                    FROM runs r LEFT JOIN observations o ON o.run_id = r.id
                    GROUP BY r.algorithm
                    ORDER BY r.algorithm
                    """
                ).fetchall()
            return {
                "total_runs": runs,
                "total_observations": totals[0] or 0,
                "distinct_cells": totals[1] or 0,
                "total_epochs": totals[2] or 0,
                "best_val_accuracy": totals[3],
                "per_algorithm": dict(per_algorithm),
            }
        except sqlite3.Error as e:
            logger.error("failed to get statistics: %s", e)
            return {
                "total_runs": 0,
                "total_observations": 0,
                "distinct_cells": 0,
                "total_epochs": 0,
                "best_val_accuracy": None,
                "per_algorithm": {},
            }

    def clear_history(self) -> bool:
        try:
            with self._connect() as conn:
                conn.execute("DELETE FROM observations")
                conn.execute("DELETE FROM runs")
            logger.info("history cleared")
            return True
        except sqlite3.Error as e:
            logger.error("failed to clear history: %s", e)
            return False

    def export_to_csv(self, output_file: Union[str, Path]) -> bool:
        """Export all observations, joined with their run, to CSV."""
        try:
            with self._connect() as conn:
                rows = conn.execute(
                    """
                    SELECT o.run_id, r.algorithm, r.oracle, r.seed, o.step, o.cell, o.budget,
                           o.val_accuracy, o.test_accuracy, o.cum_epochs
                    FROM observations o JOIN runs r ON r.id = o.run_id
                    ORDER BY o.run_id, o.step
                    """
                ).fetchall()

            with open(output_file, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow([
                    "run_id", "algorithm", "oracle", "seed", "step", "cell", "budget",
                    "val_accuracy", "test_accuracy", "cum_epochs",
                ])
                writer.writerows(rows)

            logger.info("exported %d observations to %s", len(rows), output_file)
            return True
        except (sqlite3.Error, OSError) as e:
            logger.error("failed to export history: %s", e)
            return False
