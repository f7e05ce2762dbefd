"""Multi-trial experiments: searcher factory, regret aggregation and CSV/SVG output.

CSV schemas:

* trace CSV: ``trial,step,cum_epochs,best_val_acc,best_test_acc``
* summary CSV: ``algo,cum_epochs,mean_regret,median_regret,q25,q75``, preceded
  by one ``#`` line naming the regret reference
* efficiency CSV: ``algo,trial,evals_to_optimum`` (empty when never reached)
* stability CSV: ``graph_id,skip_bits,avg_error,top_error,gap``
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .baselines import (
    EvolutionConfig,
    HyperbandSearch,
    JointBOHBSearch,
    RandomSearch,
    RegularizedEvolution,
    TPESearch,
)
from .benchmark import Oracle, OracleSpec, SyntheticOracle, load_records
from .bohb import BudgetLadder
from .engine import EngineConfig, GPNASSearcher, RegretTrace, Searcher, StabilityRow, observations_to_batch
from .logger import get_logger
from .predictor import PredictorParams, TrainConfig, evaluate_ranking, train
from .tpe import Observation

logger = get_logger(__name__)

ALGORITHMS: Tuple[str, ...] = ("gpnas", "rs", "re", "hb", "tpe", "bohb")
TRACE_COLUMNS = ["trial", "step", "cum_epochs", "best_val_acc", "best_test_acc"]
SUMMARY_COLUMNS = ["algo", "cum_epochs", "mean_regret", "median_regret", "q25", "q75"]
EFFICIENCY_COLUMNS = ["algo", "trial", "evals_to_optimum"]
STABILITY_COLUMNS = ["graph_id", "skip_bits", "avg_error", "top_error", "gap"]


def _fmt(value: float) -> str:
    return format(float(value), ".10g")


def parse_oracle(text: str, ladder: Optional[BudgetLadder] = None) -> Oracle:
    """Build an oracle from ``synth:n4[:ops3][:noise0.01][:seed7]`` or ``file:<path>``."""
    kind, sep, rest = text.partition(":")
    if not sep or not rest:
        raise ValueError(f"oracle must look like 'synth:n4' or 'file:PATH' (value: {text!r})")
    if kind == "file":
        oracle = load_records(rest)
        if ladder is not None and oracle.ladder.budgets != ladder.budgets:
            logger.warning("record file ladder %s overrides configured ladder %s",
                           list(oracle.ladder.budgets), list(ladder.budgets))
        return oracle
    if kind != "synth":
        raise ValueError(f"unknown oracle kind {kind!r} (expected 'synth' or 'file')")

    options: Dict[str, Union[int, float]] = {"n": 4, "ops": 3, "noise": 0.0, "seed": 0}
    for token in rest.split(":"):
        for name in ("noise", "seed", "ops", "n"):
            if token.startswith(name):
                value = token[len(name):]
                try:
                    options[name] = float(value) if name == "noise" else int(value)
                except ValueError:
                    raise ValueError(f"bad oracle option {token!r} in {text!r}") from None
                break
        else:
            raise ValueError(f"unknown oracle option {token!r} in {text!r}")
    spec = OracleSpec(
        n_nodes=int(options["n"]),
        seed=int(options["seed"]),
        noise_sd=float(options["noise"]),
        ladder=ladder if ladder is not None else BudgetLadder(),
        op_choices=int(options["ops"]),
    )
    return SyntheticOracle(spec)


@dataclass(frozen=True)
class ExperimentSpec:
    algorithm: str
    oracle: str
    n_trials: int = 100
    max_cost: int = 20000
    seed_base: int = 0
    max_evals: Optional[int] = None

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm: must be one of {', '.join(ALGORITHMS)} (value: {self.algorithm})")
        if self.n_trials < 1:
            raise ValueError(f"n_trials: must be >= 1 (value: {self.n_trials})")
        if self.max_cost < 1:
            raise ValueError(f"max_cost: must be >= 1 (value: {self.max_cost})")


@dataclass(frozen=True)
class SearchSettings:
    """Per-algorithm settings handed to :func:`make_searcher`."""

    engine: EngineConfig = field(default_factory=EngineConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)


def make_searcher(
    algorithm: str,
    oracle: Oracle,
    rng: np.random.Generator,
    settings: Optional[SearchSettings] = None,
) -> Searcher:
    settings = settings if settings is not None else SearchSettings()
    engine = settings.engine
    if engine.ladder.budgets != oracle.ladder.budgets:
        engine = engine.for_ladder(oracle.ladder)
    if algorithm == "gpnas":
        return GPNASSearcher(oracle, rng, engine)
    if algorithm == "rs":
        return RandomSearch(oracle, rng)
    if algorithm == "re":
        return RegularizedEvolution(oracle, rng, settings.evolution)
    if algorithm == "hb":
        return HyperbandSearch(oracle, rng, engine.split)
    if algorithm == "tpe":
        return TPESearch(oracle, rng, engine.split)
    if algorithm == "bohb":
        return JointBOHBSearch(oracle, rng, engine.split)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def run_trial(
    spec: ExperimentSpec,
    oracle: Oracle,
    trial: int,
    settings: Optional[SearchSettings] = None,
) -> RegretTrace:
    """One independent run seeded with ``seed_base + trial``."""
    rng = np.random.default_rng(spec.seed_base + trial)
    searcher = make_searcher(spec.algorithm, oracle, rng, settings)
    return searcher.run(max_cost=spec.max_cost, max_evals=spec.max_evals)


def run_trials(
    spec: ExperimentSpec,
    oracle: Oracle,
    settings: Optional[SearchSettings] = None,
    workers: int = 1,
) -> List[RegretTrace]:
    """All trials of ``spec``, in trial order; ``workers > 1`` runs them on a thread pool."""
    logger.info("running %d %s trials on %s", spec.n_trials, spec.algorithm, oracle.describe())
    trials = range(spec.n_trials)
    if workers <= 1:
        return [run_trial(spec, oracle, t, settings) for t in trials]
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="trial") as pool:
        return list(pool.map(lambda t: run_trial(spec, oracle, t, settings), trials))


@dataclass(frozen=True)
class Bands:
    grid: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray


def cost_grid(max_cost: int, n_points: int = 50) -> np.ndarray:
    """Evenly spaced integer cost checkpoints ending exactly at ``max_cost``."""
    if max_cost < 1 or n_points < 1:
        raise ValueError("max_cost and n_points must be >= 1")
    return np.unique(np.round(np.linspace(max_cost / n_points, max_cost, n_points)).astype(np.int64))


def step_values(
    trace: RegretTrace,
    grid: Sequence[float],
    reference: Optional[float] = None,
) -> np.ndarray:
    """Right-continuous step interpolation of best-so-far accuracy (or regret) onto ``grid``.

    Before the first evaluation the best accuracy is 0.
    """
    costs = trace.costs()
    values = np.concatenate([[0.0], trace.values("best_val_acc")])
    index = np.searchsorted(costs, np.asarray(grid), side="right")
    series = values[index]
    return reference - series if reference is not None else series


def aggregate_traces(
    traces: Sequence[RegretTrace],
    grid: Sequence[float],
    reference: Optional[float] = None,
) -> Bands:
    """Pointwise mean, median and 25/75% quantiles of the step-interpolated traces."""
    if not traces:
        raise ValueError("aggregate_traces needs at least one trace")
    grid = np.asarray(grid)
    matrix = np.vstack([step_values(t, grid, reference) for t in traces])
    return Bands(
        grid,
        matrix.mean(axis=0),
        np.median(matrix, axis=0),
        np.quantile(matrix, 0.25, axis=0),
        np.quantile(matrix, 0.75, axis=0),
    )


def regret_reference(oracle: Oracle, traces_by_algo: Mapping[str, Sequence[RegretTrace]]) -> Tuple[float, str]:
    """Global optimum in exhaustive mode, else the best accuracy any compared run observed."""
    optimum = oracle.global_optimum()
    if optimum is not None:
        return optimum.final_accuracy, f"global optimum {optimum.encoding} (exhaustive)"
    best = max((t.best_val_acc for traces in traces_by_algo.values() for t in traces), default=0.0)
    return best, "best accuracy observed across all compared runs (non-exhaustive)"


def write_trace_csv(traces: Sequence[RegretTrace], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for trial, trace in enumerate(traces):
            for step, s in enumerate(trace.steps, start=1):
                writer.writerow([trial, step, s.cum_epochs, _fmt(s.best_val_acc), _fmt(s.best_test_acc)])
    return path


def write_summary_csv(
    bands_by_algo: Mapping[str, Bands],
    path: Union[str, Path],
    reference: float,
    reference_note: str,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# regret reference {_fmt(reference)}: {reference_note}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for algo, bands in bands_by_algo.items():
            for i, cost in enumerate(bands.grid):
                writer.writerow([
                    algo, int(cost), _fmt(bands.mean[i]), _fmt(bands.median[i]), _fmt(bands.q25[i]), _fmt(bands.q75[i]),
                ])
    return path


def evals_to_optimum(traces: Sequence[RegretTrace], oracle: Oracle) -> List[Optional[int]]:
    optimum = oracle.global_optimum()
    if optimum is None:
        return [None] * len(traces)
    return [t.evals_to(optimum.cell) for t in traces]


def write_efficiency_csv(efficiency: Mapping[str, Sequence[Optional[int]]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(EFFICIENCY_COLUMNS)
        for algo, counts in efficiency.items():
            for trial, count in enumerate(counts):
                writer.writerow([algo, trial, "" if count is None else count])
    return path


def compare_efficiency(
    efficiency: Mapping[str, Sequence[Optional[int]]],
    traces_by_algo: Mapping[str, Sequence[RegretTrace]],
    reference_algo: str = "gpnas",
) -> Dict[str, Dict[str, float]]:
    """Median evaluations-to-optimum per algorithm and a one-sided Mann-Whitney test against ``reference_algo``.

    Trials that never reached the optimum count as one more evaluation than they ran.
    """
    def filled(algo: str) -> np.ndarray:
        return np.array([
            count if count is not None else len(trace) + 1
            for count, trace in zip(efficiency[algo], traces_by_algo[algo])
        ], dtype=float)

    results: Dict[str, Dict[str, float]] = {}
    for algo in efficiency:
        values = filled(algo)
        entry = {"median": float(np.median(values)), "found": float(sum(c is not None for c in efficiency[algo]))}
        if algo != reference_algo and reference_algo in efficiency:
            ref = filled(reference_algo)
            entry["p_value"] = float(stats.mannwhitneyu(ref, values, alternative="less").pvalue)
            entry["ratio"] = float(np.median(values) / np.median(ref)) if np.median(ref) > 0 else math.inf
        results[algo] = entry
        logger.info("%s: median evaluations to optimum %.1f (%d trials found it)%s", algo, entry["median"],
                    int(entry["found"]),
                    f", {reference_algo} faster p={entry['p_value']:.4g}" if "p_value" in entry else "")
    return results


def write_stability_csv(rows: Sequence[StabilityRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(STABILITY_COLUMNS)
        for row in rows:
            writer.writerow([row.graph_id, row.skip_bits, _fmt(row.avg_error), _fmt(row.top_error), _fmt(row.gap)])
    return path


_PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#7f7f7f")


def write_regret_svg(
    bands_by_algo: Mapping[str, Bands],
    path: Union[str, Path],
    width: int = 640,
    height: int = 400,
) -> Path:
    """Mean regret per algorithm as SVG polylines on a log-scaled regret axis."""
    path = Path(path)
    margin = 50
    floor = 1e-4
    all_grid = np.concatenate([b.grid for b in bands_by_algo.values()])
    all_mean = np.concatenate([np.maximum(b.mean, floor) for b in bands_by_algo.values()])
    x_max = float(all_grid.max()) if all_grid.size else 1.0
    lo, hi = math.log10(float(all_mean.min())), math.log10(float(all_mean.max()))
    if hi - lo < 1e-9:
        lo, hi = lo - 1.0, hi + 1.0

    def to_xy(cost: float, regret: float) -> Tuple[float, float]:
        x = margin + (width - 2 * margin) * cost / x_max
        y = margin + (height - 2 * margin) * (hi - math.log10(max(regret, floor))) / (hi - lo)
        return x, y

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="12">cumulative epochs</text>',
        f'<text x="14" y="{height / 2:.0f}" transform="rotate(-90 14 {height / 2:.0f})" text-anchor="middle" '
        f'font-size="12">mean regret (log)</text>',
    ]
    for k, (algo, bands) in enumerate(bands_by_algo.items()):
        color = _PALETTE[k % len(_PALETTE)]
        points = " ".join(f"{x:.1f},{y:.1f}" for x, y in (to_xy(c, r) for c, r in zip(bands.grid, bands.mean)))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{points}"/>')
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 16 * k}" font-size="12" fill="{color}">{algo}</text>'
        )
    parts.append("</svg>")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
    return path


@dataclass
class ComparisonResult:
    traces: Dict[str, List[RegretTrace]]
    bands: Dict[str, Bands]
    reference: float
    reference_note: str
    efficiency: Dict[str, List[Optional[int]]]
    efficiency_stats: Dict[str, Dict[str, float]]
    files: List[Path]


def run_comparison(
    algorithms: Sequence[str],
    oracle: Oracle,
    out_dir: Union[str, Path],
    n_trials: int,
    max_cost: int,
    seed_base: int = 0,
    settings: Optional[SearchSettings] = None,
    workers: int = 1,
    grid_points: int = 50,
    svg: bool = False,
) -> ComparisonResult:
    """Regret study: every algorithm over the same seeds, then per-trial, summary and efficiency files."""
    out_dir = Path(out_dir)
    traces: Dict[str, List[RegretTrace]] = {}
    for algo in algorithms:
        spec = ExperimentSpec(algo, oracle.describe(), n_trials, max_cost, seed_base)
        traces[algo] = run_trials(spec, oracle, settings, workers)

    reference, note = regret_reference(oracle, traces)
    grid = cost_grid(max_cost, grid_points)
    bands = {algo: aggregate_traces(traces[algo], grid, reference) for algo in algorithms}
    efficiency = {algo: evals_to_optimum(traces[algo], oracle) for algo in algorithms}

    files = [write_trace_csv(traces[algo], out_dir / f"trace_{algo}.csv") for algo in algorithms]
    files.append(write_summary_csv(bands, out_dir / "summary.csv", reference, note))
    files.append(write_efficiency_csv(efficiency, out_dir / "efficiency.csv"))
    if svg:
        files.append(write_regret_svg(bands, out_dir / "regret.svg"))
    efficiency_stats = compare_efficiency(efficiency, traces) if oracle.global_optimum() is not None else {}
    for path in files:
        logger.info("wrote %s", path)
    return ComparisonResult(traces, bands, reference, note, efficiency, efficiency_stats, files)


def sample_observations(
    oracle: Oracle,
    n: int,
    rng: np.random.Generator,
    budget: Optional[int] = None,
) -> List[Observation]:
    """``n`` uniform-random cells evaluated at ``budget`` (largest budget by default)."""
    budget = budget if budget is not None else oracle.ladder.max_budget
    observations = []
    for i in range(n):
        cell = oracle.space.sample_cell(rng)
        observations.append(Observation(cell, budget, oracle.query(cell, budget), i))
    return observations


def fit_predictor(
    oracle: Oracle,
    n_samples: int,
    rng: np.random.Generator,
    config: Optional[TrainConfig] = None,
) -> Tuple[PredictorParams, List[float]]:
    """Train a fresh predictor on random observations of ``oracle``."""
    config = config if config is not None else TrainConfig()
    levels = len(oracle.ladder.budgets)
    if config.n_budget_levels != levels:
        config = replace(config, n_budget_levels=levels)
    rows = sample_observations(oracle, n_samples, rng)
    params = PredictorParams.initialize(config)
    return train(params, observations_to_batch(rows, oracle.ladder), config)


def evaluate_predictor(params: PredictorParams, oracle: Oracle) -> Dict[str, float]:
    """Ranking quality of ``params`` against the oracle's exhaustive table at the largest budget."""
    table = oracle.table()
    return evaluate_ranking(
        params,
        [r.cell for r in table],
        [r.final_accuracy for r in table],
        len(oracle.ladder.budgets) - 1,
    )
