"""Tree Parzen Estimator over the discrete cell sub-spaces.

The observation pool is split at a budget into a good and a bad set, each set
is modelled by a product of Aitchison-Aitken categorical kernels, and new
candidates are drawn from the (bandwidth-widened) good density and ranked by
l(x) / g(x). Higher accuracy is better throughout.
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, replace
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .exceptions import PoolTooSmallError
from .logger import get_logger
from .search_space import (
    CellGraph,
    GeneralizedOp,
    SearchSpace,
    SkipPattern,
    is_valid_skip_bits,
)

logger = get_logger(__name__)

BANDWIDTH_GRID: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
# used when a set is too small for leave-one-out selection
DEFAULT_BANDWIDTH = 0.5
RATIO_EPSILON = 1e-12


@dataclass(frozen=True)
class Observation:
    """One evaluated configuration: what was trained, for how long, and how well it did."""

    config: Any
    budget: int
    accuracy: float
    timestamp: int = 0

    def __post_init__(self) -> None:
        if not self.budget >= 1:
            raise ValueError(f"budget: must be >= 1 (value: {self.budget})")
        if not (0.0 <= self.accuracy <= 1.0):
            raise ValueError(f"accuracy: must be in [0, 1] (value: {self.accuracy})")


@dataclass(frozen=True)
class SplitSpec:
    """TPE/BOHB knobs: good-set sizing, random fraction and candidate sampling."""

    n_min: int = 5
    q: float = 0.15
    alpha_quantile: float = 0.15
    n_samples: int = 64
    bandwidth_factor: float = 3.0
    rho: float = 0.2

    def __post_init__(self) -> None:
        checks = [
            (self.n_min >= 1, "n_min: must be >= 1", self.n_min),
            (0.0 < self.q < 1.0, "q: must be in (0, 1)", self.q),
            (0.0 < self.alpha_quantile < 1.0, "alpha_quantile: must be in (0, 1)", self.alpha_quantile),
            (self.n_samples >= 1, "n_samples: must be >= 1", self.n_samples),
            (self.bandwidth_factor >= 1.0, "bandwidth_factor: must be >= 1", self.bandwidth_factor),
            (0.0 <= self.rho <= 1.0, "rho: must be in [0, 1]", self.rho),
        ]
        for ok, message, value in checks:
            if not ok:
                raise ValueError(f"{message} (value: {value})")

    @property
    def min_pool(self) -> int:
        return self.n_min + 2

    def split_sizes(self, n_b: int) -> Tuple[int, int]:
        n_good = max(self.n_min, math.floor(self.q * n_b + 1e-9))
        n_bad = max(self.n_min, n_b - n_good)
        return n_good, n_bad


class Subspace(ABC):
    """A finite product domain the KDEs live on; configurations map to int vectors."""

    name = "subspace"

    def __init__(self, space: SearchSpace) -> None:
        self.space = space

    @property
    @abstractmethod
    def cardinalities(self) -> np.ndarray:
        """Number of choices per dimension."""

    @abstractmethod
    def encode(self, config: Any) -> np.ndarray:
        """Project a cell (or a native sub-space value) onto this sub-space."""

    @abstractmethod
    def decode(self, vector: np.ndarray) -> Any:
        """Turn a valid vector back into a sub-space value."""

    @abstractmethod
    def sample_uniform(self, rng: np.random.Generator) -> Any:
        """Uniform draw over the valid part of the sub-space."""

    def is_valid(self, vector: np.ndarray) -> bool:
        return True

    @property
    def n_dims(self) -> int:
        return len(self.cardinalities)


class SkipSubspace(Subspace):
    """Skip-connection domain: one Bernoulli dimension per upper-triangular edge slot."""

    name = "skip"

    @property
    def cardinalities(self) -> np.ndarray:
        return np.full(self.space.n_edge_slots, 2, dtype=np.int64)

    def encode(self, config: Any) -> np.ndarray:
        skip = config.skip if isinstance(config, CellGraph) else config
        return np.asarray(skip.edges, dtype=np.int64)

    def decode(self, vector: np.ndarray) -> SkipPattern:
        return SkipPattern(self.space.n_nodes, tuple(bool(v) for v in vector))

    def is_valid(self, vector: np.ndarray) -> bool:
        return is_valid_skip_bits(self.space.n_nodes, [bool(v) for v in vector])

    def sample_uniform(self, rng: np.random.Generator) -> SkipPattern:
        return self.space.sample_skip(rng)


class OpSubspace(Subspace):
    """Operator domain: one categorical dimension per node over the allowed generalized operators."""

    name = "op"

    @property
    def cardinalities(self) -> np.ndarray:
        return np.full(self.space.n_nodes, self.space.n_op_choices, dtype=np.int64)

    def encode(self, config: Any) -> np.ndarray:
        ops = config.ops if isinstance(config, CellGraph) else config
        return np.asarray([self.space.choice_index(g) for g in ops], dtype=np.int64)

    def decode(self, vector: np.ndarray) -> Tuple[GeneralizedOp, ...]:
        return tuple(self.space.op_choices[int(v)] for v in vector)

    def sample_uniform(self, rng: np.random.Generator) -> Tuple[GeneralizedOp, ...]:
        return self.space.sample_ops(rng)


class CellSubspace(Subspace):
    """Joint domain (edges then node operators) for the non-alternating searchers."""

    name = "cell"

    def __init__(self, space: SearchSpace) -> None:
        super().__init__(space)
        self._skip = SkipSubspace(space)
        self._ops = OpSubspace(space)

    @property
    def cardinalities(self) -> np.ndarray:
        return np.concatenate([self._skip.cardinalities, self._ops.cardinalities])

    def encode(self, config: Any) -> np.ndarray:
        return np.concatenate([self._skip.encode(config), self._ops.encode(config)])

    def decode(self, vector: np.ndarray) -> CellGraph:
        cut = self.space.n_edge_slots
        return CellGraph(self._skip.decode(vector[:cut]), self._ops.decode(vector[cut:]))

    def is_valid(self, vector: np.ndarray) -> bool:
        return self._skip.is_valid(vector[: self.space.n_edge_slots])

    def sample_uniform(self, rng: np.random.Generator) -> CellGraph:
        return self.space.sample_cell(rng)


class CategoricalKDE:
    """Product of Aitchison-Aitken kernels averaged over the fitted observations.

    With smoothing ``h`` on a k-way dimension a single observation puts mass
    ``(1 - h) + h / k`` on its own value and ``h / k`` on every other value.
    """

    def __init__(self, data: np.ndarray, cardinalities: np.ndarray, bandwidths: np.ndarray) -> None:
        self.data = np.atleast_2d(np.asarray(data, dtype=np.int64))
        self.cardinalities = np.asarray(cardinalities, dtype=np.int64)
        self.bandwidths = np.clip(np.asarray(bandwidths, dtype=float), 0.0, 1.0)
        if self.data.shape[0] == 0:
            raise ValueError("cannot fit a KDE on an empty observation set")
        if self.data.shape[1] != len(self.cardinalities) or len(self.bandwidths) != len(self.cardinalities):
            raise ValueError("data, cardinalities and bandwidths disagree on the number of dimensions")

    @property
    def n_obs(self) -> int:
        return self.data.shape[0]

    def widened(self, factor: float) -> "CategoricalKDE":
        return CategoricalKDE(self.data, self.cardinalities, np.minimum(1.0, self.bandwidths * factor))

    def marginal(self, dim: int) -> np.ndarray:
        """Probability vector of one dimension; sums to 1."""
        k = int(self.cardinalities[dim])
        h = self.bandwidths[dim]
        counts = np.bincount(self.data[:, dim], minlength=k).astype(float)
        return (1.0 - h) * counts / self.n_obs + h / k

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(x, dtype=np.int64))
        off = self.bandwidths / self.cardinalities
        on = 1.0 - self.bandwidths + off
        match = points[:, None, :] == self.data[None, :, :]
        with np.errstate(divide="ignore"):
            log_kernel = np.where(match, np.log(on), np.log(off)).sum(axis=-1)
        return logsumexp(log_kernel, axis=1) - math.log(self.n_obs)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_pdf(x))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        centers = self.data[rng.integers(0, self.n_obs, size=size)]
        keep = rng.random((size, len(self.cardinalities))) >= self.bandwidths
        uniform = rng.integers(0, self.cardinalities, size=(size, len(self.cardinalities)))
        return np.where(keep, centers, uniform)


@dataclass(frozen=True)
class KdePair:
    """Good (l) and bad (g) densities fitted at one budget level."""

    good: CategoricalKDE
    bad: CategoricalKDE
    n_good: int
    n_bad: int
    budget: int
    threshold: float


def loo_bandwidths(data: np.ndarray, cardinalities: np.ndarray) -> np.ndarray:
    """Per-dimension smoothing chosen by leave-one-out likelihood over ``BANDWIDTH_GRID``."""
    data = np.atleast_2d(data)
    n = data.shape[0]
    if n < 2:
        return np.full(len(cardinalities), DEFAULT_BANDWIDTH)
    grid = np.asarray(BANDWIDTH_GRID)
    chosen = np.empty(len(cardinalities))
    for dim, k in enumerate(cardinalities):
        counts = np.bincount(data[:, dim], minlength=int(k))
        others = counts[data[:, dim]] - 1
        # rows: grid values, cols: held-out observations
        p = (1.0 - grid[:, None]) * others[None, :] / (n - 1) + grid[:, None] / k
        scores = np.log(p).sum(axis=1)
        chosen[dim] = grid[int(np.argmax(scores))]
    return chosen


def fit_kde(
    observations: Sequence[Observation],
    subspace: Subspace,
    bandwidth_factor: float = 1.0,
    bandwidths: Optional[Sequence[float]] = None,
) -> CategoricalKDE:
    """Fit the categorical product KDE of ``observations`` projected onto ``subspace``."""
    if not observations:
        raise ValueError("cannot fit a KDE on an empty observation set")
    data = np.stack([subspace.encode(o.config) for o in observations])
    cards = subspace.cardinalities
    base = np.asarray(bandwidths, dtype=float) if bandwidths is not None else loo_bandwidths(data, cards)
    return CategoricalKDE(data, cards, np.minimum(1.0, base * bandwidth_factor))


def _ranked(pool: Sequence[Observation], budget: int) -> List[Observation]:
    at_budget = [o for o in pool if o.budget == budget]
    return sorted(at_budget, key=lambda o: (-o.accuracy, o.timestamp))


def split_pool(
    pool: Sequence[Observation],
    spec: SplitSpec,
    budget: int,
) -> Tuple[List[Observation], List[Observation]]:
    """Split the budget's observations into the top ``n_good`` and the bottom ``n_bad``.

    ``n_good = max(n_min, floor(q * N_b))`` and ``n_bad = max(n_min, N_b - n_good)``;
    the two sets overlap only when the ``n_min`` floors force it.
    """
    ranked = _ranked(pool, budget)
    n_b = len(ranked)
    if n_b < spec.min_pool:
        raise PoolTooSmallError(budget, n_b, spec.min_pool)
    n_good, n_bad = spec.split_sizes(n_b)
    return ranked[:n_good], ranked[n_b - n_bad:]


def accuracy_threshold(pool: Sequence[Observation], spec: SplitSpec, budget: int) -> float:
    """Accuracy at the (1 - alpha_quantile) percentile of the budget's observations."""
    accuracies = [o.accuracy for o in pool if o.budget == budget]
    if not accuracies:
        raise PoolTooSmallError(budget, 0, 1)
    return float(np.quantile(accuracies, 1.0 - spec.alpha_quantile))


def fit_kde_pair(pool: Sequence[Observation], spec: SplitSpec, budget: int, subspace: Subspace) -> KdePair:
    good, bad = split_pool(pool, spec, budget)
    pair = KdePair(
        good=fit_kde(good, subspace),
        bad=fit_kde(bad, subspace),
        n_good=len(good),
        n_bad=len(bad),
        budget=budget,
        threshold=accuracy_threshold(pool, spec, budget),
    )
    logger.debug(
        "%s KDE pair at budget %d: n_good=%d n_bad=%d threshold=%.4f",
        subspace.name, budget, pair.n_good, pair.n_bad, pair.threshold,
    )
    return pair


def expected_improvement_density(x: np.ndarray, good: CategoricalKDE, bad: CategoricalKDE) -> np.ndarray:
    """l(x) / g(x) with g floored at ``RATIO_EPSILON``; accepts one vector or a batch."""
    log_l = good.log_pdf(x)
    log_g = np.maximum(bad.log_pdf(x), math.log(RATIO_EPSILON))
    ratio = np.exp(log_l - log_g)
    return ratio[0] if np.ndim(x) == 1 else ratio


def model_budget(pool: Sequence[Observation], spec: SplitSpec) -> Optional[int]:
    """Largest budget whose pool satisfies the ``n_min + 2`` size bound, if any."""
    sizes = Counter(o.budget for o in pool)
    eligible = [b for b, n in sizes.items() if n >= spec.min_pool]
    return max(eligible) if eligible else None


def propose(
    pool: Sequence[Observation],
    spec: SplitSpec,
    subspace: Subspace,
    rng: np.random.Generator,
) -> Any:
    """Propose one configuration of ``subspace`` from the observation pool.

    With probability ``rho``, or when no budget level is large enough to model,
    the proposal is uniform. Otherwise ``n_samples`` candidates are drawn from
    the widened good density and the one with the highest l/g ratio wins.
    """
    if rng.random() < spec.rho:
        return subspace.sample_uniform(rng)

    budget = model_budget(pool, spec)
    if budget is None:
        logger.warning("%s proposal: no budget with %d observations, sampling uniformly", subspace.name, spec.min_pool)
        return subspace.sample_uniform(rng)

    pair = fit_kde_pair(pool, spec, budget, subspace)
    candidates = pair.good.widened(spec.bandwidth_factor).sample(rng, spec.n_samples)
    valid = np.array([subspace.is_valid(c) for c in candidates], dtype=bool)
    if not valid.any():
        logger.debug("%s proposal: no valid candidate among %d draws", subspace.name, spec.n_samples)
        return subspace.sample_uniform(rng)

    candidates = candidates[valid]
    scores = expected_improvement_density(candidates, pair.good, pair.bad)
    best = int(np.argmax(scores))
    return subspace.decode(candidates[best])


def with_rho(spec: SplitSpec, rho: float) -> SplitSpec:
    return replace(spec, rho=rho)


__all__ = [
    "CategoricalKDE",
    "CellSubspace",
    "KdePair",
    "Observation",
    "OpSubspace",
    "SkipSubspace",
    "SplitSpec",
    "Subspace",
    "accuracy_threshold",
    "expected_improvement_density",
    "fit_kde",
    "fit_kde_pair",
    "loo_bandwidths",
    "model_budget",
    "propose",
    "split_pool",
    "with_rho",
]
