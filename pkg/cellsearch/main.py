"""Command-line entry point: search, compare, stability, bench gen and predictor fit/eval."""
from __future__ import annotations

import argparse
import logging
import sqlite3
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .benchmark import Oracle, SyntheticOracle, enumerate_space, write_records
from .config_manager import ConfigManager
from .engine import run_stability_study
from .exceptions import CellSearchError
from .harness import (
    ALGORITHMS,
    SearchSettings,
    evaluate_predictor,
    fit_predictor,
    make_searcher,
    parse_oracle,
    run_comparison,
    write_stability_csv,
    write_trace_csv,
)
from .history_manager import HistoryManager
from .logger import CellSearchLogger, get_logger
from .predictor import load_params, predict, save_params
from .search_space import SkipPattern, decode_cell, encode_cell, sample_skip_pattern, triu_pairs

logger = get_logger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellsearch",
        description="Cell-based architecture search with alternating BOHB and a graph predictor",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable verbose debug output")
    parser.add_argument("-q", "--quiet", action="store_true", help="Suppress all console output except errors")
    parser.add_argument("--log-file", type=str, default=None, help="Write logs to specified file")
    parser.add_argument("--config", type=str, default=None, help="key = value settings file overriding defaults")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    def add_oracle(p: argparse.ArgumentParser) -> None:
        p.add_argument("--oracle", type=str, default=None,
                       help="synth:n4[:ops3][:noise0.01][:seed7] or file:PATH (default: from config)")

    search = commands.add_parser("search", help="Run one search and write its trace")
    add_oracle(search)
    search.add_argument("--algo", choices=ALGORITHMS, default="gpnas", help="Search algorithm")
    search.add_argument("--seed", type=int, default=0, help="Search seed")
    search.add_argument("--max-cost", type=int, default=None, help="Simulated epoch budget")
    search.add_argument("--max-evals", type=int, default=None, help="Stop after this many evaluations")
    search.add_argument("--out", type=str, default="trace.csv", help="Trace CSV path")
    search.add_argument("--history", type=str, default=None, help="SQLite file recording every evaluation")

    compare = commands.add_parser("compare", help="Multi-trial regret study")
    add_oracle(compare)
    compare.add_argument("--algos", type=str, default=",".join(ALGORITHMS), help="Comma-separated algorithms")
    compare.add_argument("--trials", type=int, default=None, help="Trials per algorithm")
    compare.add_argument("--seed", type=int, default=None, help="Seed of trial 0")
    compare.add_argument("--max-cost", type=int, default=None, help="Simulated epoch budget per trial")
    compare.add_argument("--workers", type=int, default=None, help="Parallel trial workers")
    compare.add_argument("--out-dir", type=str, default="results", help="Output directory")
    compare.add_argument("--svg", action="store_true", help="Also render regret.svg")

    stability = commands.add_parser("stability", help="Operator-only search on fixed skip patterns")
    add_oracle(stability)
    stability.add_argument("--graph", action="append", default=None, metavar="BITS",
                           help="Upper-triangular edge bits of a fixed graph (repeatable)")
    stability.add_argument("--graphs", type=int, default=3, help="Random graphs to draw when --graph is absent")
    stability.add_argument("--evals", type=int, default=60, help="Evaluations per graph")
    stability.add_argument("--samples", type=int, default=64, help="Operator assignments scored per graph")
    stability.add_argument("--seed", type=int, default=0, help="Seed")
    stability.add_argument("--out", type=str, default="stability.csv", help="Stability CSV path")

    bench = commands.add_parser("bench", help="Benchmark utilities")
    bench_commands = bench.add_subparsers(dest="bench_command", metavar="ACTION")
    bench_commands.required = True
    gen = bench_commands.add_parser("gen", help="Write an exhaustive synthetic record file")
    add_oracle(gen)
    gen.add_argument("--out", type=str, required=True, help="Record file path")

    predictor = commands.add_parser("predictor", help="Standalone predictor training and evaluation")
    predictor_commands = predictor.add_subparsers(dest="predictor_command", metavar="ACTION")
    predictor_commands.required = True
    fit = predictor_commands.add_parser("fit", help="Train on random observations and save")
    add_oracle(fit)
    fit.add_argument("--samples", type=int, default=500, help="Random observations to train on")
    fit.add_argument("--seed", type=int, default=0, help="Sampling seed")
    fit.add_argument("--out", type=str, default="predictor.npz", help="Parameter file")
    ev = predictor_commands.add_parser("eval", help="Rank the exhaustive table with a saved predictor")
    add_oracle(ev)
    ev.add_argument("--model", type=str, required=True, help="Parameter file from 'predictor fit'")
    ev.add_argument("--top", type=int, default=10, help="Show the top-k predicted cells")
    return parser


def _oracle(args: argparse.Namespace, config: ConfigManager) -> Oracle:
    if args.oracle:
        return parse_oracle(args.oracle, config.ladder())
    return SyntheticOracle(config.oracle_spec())


def _settings(config: ConfigManager) -> SearchSettings:
    return SearchSettings(config.engine_config(), config.evolution_config())


def cmd_search(args: argparse.Namespace, config: ConfigManager) -> int:
    oracle = _oracle(args, config)
    max_cost = args.max_cost if args.max_cost is not None else config.get("harness.max_cost")
    searcher = make_searcher(args.algo, oracle, np.random.default_rng(args.seed), _settings(config))
    trace = searcher.run(max_cost=max_cost, max_evals=args.max_evals)
    write_trace_csv([trace], args.out)

    incumbent = trace.incumbent
    if incumbent is None:
        raise ValueError("search stopped before its first evaluation; raise --max-cost or --max-evals")
    print(f"best {encode_cell(incumbent)} val={trace.best_val_acc:.6f} test={trace.best_test_acc:.6f} "
          f"evals={len(trace)} epochs={trace.cum_epochs}")
    print("ops " + ", ".join(g.label for g in incumbent.ops))
    print(f"trace written to {args.out}")

    if args.history:
        history = HistoryManager(args.history)
        run_id = history.start_run(args.algo, oracle.describe(), args.seed)
        stored = 0 if run_id is None else history.add_trace(
            run_id, trace, lambda enc: oracle.test_accuracy(decode_cell(enc)))
        if stored != len(trace):
            print(f"cellsearch: error: recorded {stored} of {len(trace)} evaluations in {args.history}",
                  file=sys.stderr)
            return 1
    return 0


def cmd_compare(args: argparse.Namespace, config: ConfigManager) -> int:
    algorithms = [a.strip() for a in args.algos.split(",") if a.strip()]
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if not algorithms or unknown:
        raise ValueError(f"--algos: must list algorithms from {', '.join(ALGORITHMS)} (value: {args.algos})")
    oracle = _oracle(args, config)
    result = run_comparison(
        algorithms,
        oracle,
        args.out_dir,
        n_trials=args.trials if args.trials is not None else config.get("harness.n_trials"),
        max_cost=args.max_cost if args.max_cost is not None else config.get("harness.max_cost"),
        seed_base=args.seed if args.seed is not None else config.get("harness.seed_base"),
        settings=_settings(config),
        workers=args.workers if args.workers is not None else config.get("harness.workers"),
        grid_points=config.get("harness.grid_points"),
        svg=args.svg,
    )
    print(f"regret reference {result.reference:.6f}: {result.reference_note}")
    for algo, bands in result.bands.items():
        print(f"{algo:>6} final mean regret {bands.mean[-1]:.6f}")
    for path in result.files:
        print(f"wrote {path}")
    return 0


def _parse_graph(bits: str, n_nodes: int) -> SkipPattern:
    if len(bits) != len(triu_pairs(n_nodes)) or set(bits) - {"0", "1"}:
        raise ValueError(f"--graph: expected {len(triu_pairs(n_nodes))} edge bits for {n_nodes} nodes (value: {bits})")
    return SkipPattern(n_nodes, tuple(b == "1" for b in bits))


def cmd_stability(args: argparse.Namespace, config: ConfigManager) -> int:
    oracle = _oracle(args, config)
    rng = np.random.default_rng(args.seed)
    n_nodes = oracle.space.n_nodes
    if args.graph:
        graphs = [_parse_graph(bits, n_nodes) for bits in args.graph]
    else:
        graphs = [sample_skip_pattern(n_nodes, rng) for _ in range(args.graphs)]
    engine = config.engine_config().for_ladder(oracle.ladder)
    rows = run_stability_study(graphs, engine, oracle, rng, args.evals, args.samples)
    write_stability_csv(rows, args.out)
    for row in rows:
        print(f"graph {row.graph_id} {row.skip_bits}: avg error {row.avg_error:.4f}, top error {row.top_error:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_bench_gen(args: argparse.Namespace, config: ConfigManager) -> int:
    oracle = _oracle(args, config)
    if not isinstance(oracle, SyntheticOracle):
        raise ValueError("bench gen needs a synthetic oracle (synth:...)")
    count = write_records(enumerate_space(oracle.spec), args.out, header=oracle.describe())
    print(f"wrote {count} records to {args.out}")
    return 0


def cmd_predictor_fit(args: argparse.Namespace, config: ConfigManager) -> int:
    oracle = _oracle(args, config)
    params, losses = fit_predictor(oracle, args.samples, np.random.default_rng(args.seed), config.train_config())
    save_params(params, args.out)
    print(f"final training loss {losses[-1]:.6f}")
    try:
        metrics = evaluate_predictor(params, oracle)
    except CellSearchError as error:
        logger.info("skipping table evaluation: %s", error)
    else:
        print(f"kendall_tau={metrics['kendall_tau']:.4f} mse={metrics['mse']:.6f} "
              f"label_variance={metrics['label_variance']:.6f}")
    print(f"wrote {args.out}")
    return 0


def cmd_predictor_eval(args: argparse.Namespace, config: ConfigManager) -> int:
    oracle = _oracle(args, config)
    params = load_params(args.model)
    metrics = evaluate_predictor(params, oracle)
    print(f"kendall_tau={metrics['kendall_tau']:.4f} mse={metrics['mse']:.6f} "
          f"label_variance={metrics['label_variance']:.6f}")
    table = oracle.table()
    scores = predict(params, [r.cell for r in table], len(oracle.ladder.budgets) - 1)
    order = sorted(range(len(table)), key=lambda i: -scores[i])
    for rank, i in enumerate(order[: args.top], start=1):
        print(f"{rank:>3} {table[i].encoding} predicted={scores[i]:.4f} true={table[i].final_accuracy:.4f}")
    return 0


def _dispatch(args: argparse.Namespace, config: ConfigManager) -> int:
    if args.command == "search":
        return cmd_search(args, config)
    if args.command == "compare":
        return cmd_compare(args, config)
    if args.command == "stability":
        return cmd_stability(args, config)
    if args.command == "bench":
        return cmd_bench_gen(args, config)
    if args.predictor_command == "fit":
        return cmd_predictor_fit(args, config)
    return cmd_predictor_eval(args, config)


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the command and return the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as exit_:
        return int(exit_.code) if isinstance(exit_.code, int) else 2

    log_level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose else logging.INFO)
    log_file = Path(args.log_file) if args.log_file else None
    CellSearchLogger.setup(level=log_level, log_file=log_file, console=not args.quiet)

    try:
        config = ConfigManager(args.config)
        return _dispatch(args, config)
    except (CellSearchError, ValueError, OSError, sqlite3.Error) as error:
        message = str(error).splitlines()[0] if str(error) else type(error).__name__
        print(f"cellsearch: error: {message}", file=sys.stderr)
        logger.debug("command failed", exc_info=True)
        return 1


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(cli_main(argv))


if __name__ == "__main__":
    main()
