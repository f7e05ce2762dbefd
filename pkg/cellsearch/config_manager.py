"""Configuration manager for search, predictor and experiment settings.

Config files are line-oriented ``key = value`` text::

    # comments and blank lines are ignored
    tpe.rho = 0.2
    engine.warmup_evals = 100

Every key must appear in :data:`CONFIG_SCHEMA`; values are parsed by the
schema type and validated before use.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from .baselines import EvolutionConfig
from .benchmark import OracleSpec
from .bohb import BudgetLadder
from .engine import EngineConfig
from .exceptions import ConfigError
from .logger import get_logger
from .predictor import TrainConfig
from .search_space import MAX_NODES, MIN_NODES, N_GENERALIZED_OPS, DropBlocker
from .tpe import SplitSpec

logger = get_logger(__name__)


# Configuration validation schema
CONFIG_SCHEMA: Dict[str, Tuple[type, Callable[[Any], bool], str]] = {
    "tpe.n_min": (int, lambda x: x >= 1, "Must be at least 1"),
    "tpe.q": (float, lambda x: 0.0 < x < 1.0, "Must be between 0 and 1 (exclusive)"),
    "tpe.alpha_quantile": (float, lambda x: 0.0 < x < 1.0, "Must be between 0 and 1 (exclusive)"),
    "tpe.n_samples": (int, lambda x: x >= 1, "Must be at least 1"),
    "tpe.bandwidth_factor": (float, lambda x: x >= 1.0, "Must be at least 1"),
    "tpe.rho": (float, lambda x: 0.0 <= x <= 1.0, "Must be between 0 and 1"),
    "ladder.min_budget": (int, lambda x: x >= 1, "Must be at least 1"),
    "ladder.max_budget": (int, lambda x: x >= 1, "Must be at least 1"),
    "ladder.eta": (int, lambda x: x >= 2, "Must be at least 2"),
    "blocker.enabled": (bool, lambda x: True, "Must be a boolean"),
    "blocker.rate0": (float, lambda x: 0.0 <= x <= 1.0, "Must be between 0 and 1"),
    "blocker.decay": (float, lambda x: 0.0 < x <= 1.0, "Must be in (0, 1]"),
    "predictor.learning_rate": (float, lambda x: x > 0.0, "Must be positive"),
    "predictor.momentum": (float, lambda x: 0.0 <= x < 1.0, "Must be in [0, 1)"),
    "predictor.epochs": (int, lambda x: x >= 1, "Must be at least 1"),
    "predictor.batch_size": (int, lambda x: x >= 1, "Must be at least 1"),
    "predictor.layers": (int, lambda x: 1 <= x <= 8, "Must be between 1 and 8"),
    "predictor.d_emb": (int, lambda x: x >= 1, "Must be at least 1"),
    "predictor.d_ep": (int, lambda x: x >= 1, "Must be at least 1"),
    "predictor.hidden": (int, lambda x: x >= 1, "Must be at least 1"),
    "predictor.mlp_width1": (int, lambda x: x >= 1, "Must be at least 1"),
    "predictor.mlp_width2": (int, lambda x: x >= 1, "Must be at least 1"),
    "predictor.sigmoid_output": (bool, lambda x: True, "Must be a boolean"),
    "predictor.seed": (int, lambda x: x >= 0, "Must be non-negative"),
    "engine.filter_enabled": (bool, lambda x: True, "Must be a boolean"),
    "engine.warmup_evals": (int, lambda x: x >= 0, "Must be non-negative"),
    "engine.filter_pool": (int, lambda x: x >= 1, "Must be at least 1"),
    "engine.filter_quantile": (float, lambda x: 0.0 < x <= 1.0, "Must be in (0, 1]"),
    "engine.retrain_every": (int, lambda x: x >= 1, "Must be at least 1"),
    "engine.alternate": (bool, lambda x: True, "Must be a boolean"),
    "evolution.population_size": (int, lambda x: x >= 2, "Must be at least 2"),
    "evolution.tournament_size": (int, lambda x: x >= 1, "Must be at least 1"),
    "oracle.n_nodes": (int, lambda x: MIN_NODES <= x <= MAX_NODES, f"Must be between {MIN_NODES} and {MAX_NODES}"),
    "oracle.op_choices": (int, lambda x: 1 <= x <= N_GENERALIZED_OPS, f"Must be between 1 and {N_GENERALIZED_OPS}"),
    "oracle.noise_sd": (float, lambda x: x >= 0.0, "Must be non-negative"),
    "oracle.seed": (int, lambda x: x >= 0, "Must be non-negative"),
    "harness.n_trials": (int, lambda x: x >= 1, "Must be at least 1"),
    "harness.max_cost": (int, lambda x: x >= 1, "Must be at least 1"),
    "harness.seed_base": (int, lambda x: x >= 0, "Must be non-negative"),
    "harness.workers": (int, lambda x: x >= 1, "Must be at least 1"),
    "harness.grid_points": (int, lambda x: x >= 2, "Must be at least 2"),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def default_config() -> Dict[str, Any]:
    """Every tunable at its module default."""
    split, ladder, blocker, train = SplitSpec(), BudgetLadder(), DropBlocker(), TrainConfig()
    engine, evolution, oracle = EngineConfig(), EvolutionConfig(), OracleSpec()
    return {
        "tpe.n_min": split.n_min,
        "tpe.q": split.q,
        "tpe.alpha_quantile": split.alpha_quantile,
        "tpe.n_samples": split.n_samples,
        "tpe.bandwidth_factor": split.bandwidth_factor,
        "tpe.rho": split.rho,
        "ladder.min_budget": ladder.min_budget,
        "ladder.max_budget": ladder.max_budget,
        "ladder.eta": ladder.eta,
        "blocker.enabled": True,
        "blocker.rate0": blocker.rate0,
        "blocker.decay": blocker.decay,
        "predictor.learning_rate": train.learning_rate,
        "predictor.momentum": train.momentum,
        "predictor.epochs": train.epochs,
        "predictor.batch_size": train.batch_size,
        "predictor.layers": train.layers,
        "predictor.d_emb": train.d_emb,
        "predictor.d_ep": train.d_ep,
        "predictor.hidden": train.hidden,
        "predictor.mlp_width1": train.mlp_widths[0],
        "predictor.mlp_width2": train.mlp_widths[1],
        "predictor.sigmoid_output": train.sigmoid_output,
        "predictor.seed": train.seed,
        "engine.filter_enabled": engine.warmup_evals is not None,
        "engine.warmup_evals": engine.warmup_evals if engine.warmup_evals is not None else 0,
        "engine.filter_pool": engine.filter_pool,
        "engine.filter_quantile": engine.filter_quantile,
        "engine.retrain_every": engine.retrain_every,
        "engine.alternate": engine.alternate,
        "evolution.population_size": evolution.population_size,
        "evolution.tournament_size": evolution.tournament_size,
        "oracle.n_nodes": oracle.n_nodes,
        "oracle.op_choices": oracle.op_choices,
        "oracle.noise_sd": oracle.noise_sd,
        "oracle.seed": oracle.seed,
        "harness.n_trials": 100,
        "harness.max_cost": 20000,
        "harness.seed_base": 0,
        "harness.workers": 1,
        "harness.grid_points": 50,
    }


def validate_config_value(key: str, value: Any) -> Tuple[bool, str]:
    """Validate a single configuration value.

    Returns:
        Tuple of (is_valid, error_message)
    """
    if key not in CONFIG_SCHEMA:
        return False, f"{key}: Unknown configuration key"

    expected_type, validator, error_msg = CONFIG_SCHEMA[key]

    if expected_type is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, expected_type) or (expected_type is int and isinstance(value, bool)):
        return False, f"{key}: {error_msg} (got {type(value).__name__})"

    if not validator(value):
        return False, f"{key}: {error_msg} (value: {value})"

    return True, ""


def validate_config(config: Dict[str, Any]) -> Tuple[bool, List[str]]:
    """Validate an entire configuration dictionary, including cross-key rules."""
    errors = []
    for key, value in config.items():
        is_valid, error_msg = validate_config_value(key, value)
        if not is_valid:
            errors.append(error_msg)

    if not errors:
        if config["ladder.max_budget"] < config["ladder.min_budget"]:
            errors.append(f"ladder.max_budget: Must be at least ladder.min_budget (value: {config['ladder.max_budget']})")
        if config["evolution.tournament_size"] > config["evolution.population_size"]:
            errors.append(
                f"evolution.tournament_size: Must not exceed evolution.population_size "
                f"(value: {config['evolution.tournament_size']})"
            )
    return len(errors) == 0, errors


def parse_value(key: str, text: str) -> Any:
    """Convert raw text to the schema type of ``key``; raises ``ValueError`` on bad input."""
    if key not in CONFIG_SCHEMA:
        raise ValueError(f"{key}: Unknown configuration key")
    expected_type = CONFIG_SCHEMA[key][0]
    raw = text.strip()
    if expected_type is bool:
        lowered = raw.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"{key}: Must be a boolean (value: {raw})")
    try:
        return expected_type(raw)
    except ValueError:
        raise ValueError(f"{key}: Must be {expected_type.__name__} (value: {raw})") from None


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class ConfigManager:
    """Typed access to every tunable, with optional overrides from a config file.

    Unlike an application settings store, nothing is written back unless
    :meth:`save` is called explicitly.
    """

    def __init__(self, config_file: Optional[Union[str, Path]] = None) -> None:
        self.config_file = Path(config_file) if config_file else None
        self.config = default_config()
        if self.config_file is not None:
            self.config.update(self._load_config(self.config_file))
        is_valid, errors = validate_config(self.config)
        if not is_valid:
            raise ConfigError(errors)

    @staticmethod
    def _load_config(path: Path) -> Dict[str, Any]:
        """Parse a ``key = value`` file; all problems are reported together."""
        values: Dict[str, Any] = {}
        errors: List[str] = []
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = f.readlines()
        except OSError as error:
            raise ConfigError([f"cannot read config file {path}: {error}"]) from error

        for line_no, line in enumerate(lines, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, sep, text = stripped.partition("=")
            key = key.strip()
            if not sep or not key:
                errors.append(f"{path}:{line_no}: expected 'key = value'")
                continue
            try:
                values[key] = parse_value(key, text)
            except ValueError as error:
                errors.append(f"{path}:{line_no}: {error}")
        if errors:
            raise ConfigError(errors)
        logger.info("loaded %d settings from %s", len(values), path)
        return values

    def save(self, path: Optional[Union[str, Path]] = None) -> Path:
        """Write every setting in file format, grouped by prefix."""
        target = Path(path) if path else self.config_file
        if target is None:
            raise ValueError("no config file path given")
        target.parent.mkdir(parents=True, exist_ok=True)
        lines = ["# cellsearch configuration"]
        section = None
        for key in CONFIG_SCHEMA:
            prefix = key.split(".", 1)[0]
            if prefix != section:
                lines.append("")
                lines.append(f"# {prefix}")
                section = prefix
            lines.append(f"{key} = {format_value(self.config[key])}")
        with open(target, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        logger.info("saved configuration to %s", target)
        return target

    def get(self, key: str, default: Any = None) -> Any:
        return self.config.get(key, default)

    def set(self, key: str, value: Any) -> None:
        is_valid, error_msg = validate_config_value(key, value)
        if not is_valid:
            raise ConfigError([error_msg])
        if CONFIG_SCHEMA[key][0] is float:
            value = float(value)
        candidate = dict(self.config, **{key: value})
        is_valid, errors = validate_config(candidate)
        if not is_valid:
            raise ConfigError(errors)
        self.config = candidate

    def reset_to_defaults(self) -> None:
        self.config = default_config()

    def split_spec(self) -> SplitSpec:
        c = self.config
        return SplitSpec(
            n_min=c["tpe.n_min"],
            q=c["tpe.q"],
            alpha_quantile=c["tpe.alpha_quantile"],
            n_samples=c["tpe.n_samples"],
            bandwidth_factor=c["tpe.bandwidth_factor"],
            rho=c["tpe.rho"],
        )

    def ladder(self) -> BudgetLadder:
        c = self.config
        return BudgetLadder(c["ladder.min_budget"], c["ladder.max_budget"], c["ladder.eta"])

    def blocker(self) -> Optional[DropBlocker]:
        c = self.config
        if not c["blocker.enabled"]:
            return None
        return DropBlocker(c["blocker.rate0"], c["blocker.decay"])

    def train_config(self) -> TrainConfig:
        c = self.config
        return TrainConfig(
            learning_rate=c["predictor.learning_rate"],
            momentum=c["predictor.momentum"],
            epochs=c["predictor.epochs"],
            batch_size=c["predictor.batch_size"],
            layers=c["predictor.layers"],
            d_emb=c["predictor.d_emb"],
            d_ep=c["predictor.d_ep"],
            hidden=c["predictor.hidden"],
            mlp_widths=(c["predictor.mlp_width1"], c["predictor.mlp_width2"]),
            n_budget_levels=len(self.ladder().budgets),
            sigmoid_output=c["predictor.sigmoid_output"],
            seed=c["predictor.seed"],
        )

    def engine_config(self) -> EngineConfig:
        c = self.config
        return EngineConfig(
            warmup_evals=c["engine.warmup_evals"] if c["engine.filter_enabled"] else None,
            filter_pool=c["engine.filter_pool"],
            filter_quantile=c["engine.filter_quantile"],
            retrain_every=c["engine.retrain_every"],
            alternate=c["engine.alternate"],
            split=self.split_spec(),
            ladder=self.ladder(),
            train=self.train_config(),
            blocker=self.blocker(),
        )

    def evolution_config(self) -> EvolutionConfig:
        c = self.config
        return EvolutionConfig(c["evolution.population_size"], c["evolution.tournament_size"])

    def oracle_spec(self) -> OracleSpec:
        c = self.config
        return OracleSpec(
            n_nodes=c["oracle.n_nodes"],
            seed=c["oracle.seed"],
            noise_sd=c["oracle.noise_sd"],
            ladder=self.ladder(),
            op_choices=c["oracle.op_choices"],
        )
