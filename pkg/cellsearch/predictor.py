"""Graph-convolutional accuracy predictor with hand-written reverse-mode gradients.

Architecture (all numpy)::

    X  = op_embedding[ops]                           node features
    H_k = ReLU(D^-1/2 (A + I) D^-1/2 H_{k-1} W_k)     k = 1..L, H_0 = X
    r  = max over nodes of H_L                       topological feature
    u  = [r ; epoch_embedding[e]]
    u  -> (Linear, BatchNorm, ReLU) x 2 -> Linear -> sigmoid

Trained with mean squared error against observed validation accuracies by
mini-batch SGD with momentum. Batch-norm uses batch statistics in training and
frozen running statistics at inference.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from .exceptions import PredictorDivergedError
from .logger import get_logger
from .search_space import N_GENERALIZED_OPS, CellGraph

logger = get_logger(__name__)

FORMAT_VERSION = 1
TENSOR_DTYPE = "<f8"


@dataclass(frozen=True)
class TrainConfig:
    """Predictor architecture and optimizer settings."""

    learning_rate: float = 1e-2
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 32
    layers: int = 3
    d_emb: int = 32
    d_ep: int = 8
    hidden: int = 64
    mlp_widths: Tuple[int, int] = (64, 32)
    n_budget_levels: int = 4
    sigmoid_output: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        checks = [
            (self.learning_rate >= 0.0, "learning_rate: must be >= 0", self.learning_rate),
            (0.0 <= self.momentum < 1.0, "momentum: must be in [0, 1)", self.momentum),
            (self.epochs >= 1, "epochs: must be >= 1", self.epochs),
            (self.batch_size >= 1, "batch_size: must be >= 1", self.batch_size),
            (self.layers >= 1, "layers: must be >= 1", self.layers),
            (self.d_emb >= 1, "d_emb: must be >= 1", self.d_emb),
            (self.d_ep >= 1, "d_ep: must be >= 1", self.d_ep),
            (self.hidden >= 1, "hidden: must be >= 1", self.hidden),
            (len(self.mlp_widths) == 2 and min(self.mlp_widths) >= 1,
             "mlp_widths: must be two positive widths", self.mlp_widths),
            (self.n_budget_levels >= 1, "n_budget_levels: must be >= 1", self.n_budget_levels),
            (0.0 <= self.bn_momentum < 1.0, "bn_momentum: must be in [0, 1)", self.bn_momentum),
            (self.bn_eps > 0.0, "bn_eps: must be > 0", self.bn_eps),
        ]
        for ok, message, value in checks:
            if not ok:
                raise ValueError(f"{message} (value: {value})")


@dataclass
class PredictorParams:
    """Trainable tensors (``tensors``) plus batch-norm running statistics (``buffers``)."""

    config: TrainConfig
    tensors: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: TrainConfig, rng: Optional[np.random.Generator] = None) -> "PredictorParams":
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        tensors: Dict[str, np.ndarray] = {
            "op_embedding": rng.normal(0.0, 1.0, (N_GENERALIZED_OPS, config.d_emb)),
            "epoch_embedding": rng.normal(0.0, 1.0, (config.n_budget_levels, config.d_ep)),
        }
        fan_in = config.d_emb
        for k in range(config.layers):
            tensors[f"gcn_{k}"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, config.hidden))
            fan_in = config.hidden
        widths = [config.hidden + config.d_ep, *config.mlp_widths, 1]
        buffers: Dict[str, np.ndarray] = {}
        for i in range(3):
            scale = math.sqrt((2.0 if i < 2 else 1.0) / widths[i])
            tensors[f"mlp_w{i}"] = rng.normal(0.0, scale, (widths[i], widths[i + 1]))
            tensors[f"mlp_b{i}"] = np.zeros(widths[i + 1])
            if i < 2:
                tensors[f"bn_gamma{i}"] = np.ones(widths[i + 1])
                tensors[f"bn_beta{i}"] = np.zeros(widths[i + 1])
                buffers[f"bn_mean{i}"] = np.zeros(widths[i + 1])
                buffers[f"bn_var{i}"] = np.ones(widths[i + 1])
        return cls(config, tensors, buffers)

    def copy(self) -> "PredictorParams":
        return PredictorParams(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    @property
    def gcn_weights(self) -> List[np.ndarray]:
        return [self.tensors[f"gcn_{k}"] for k in range(self.config.layers)]


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 for a symmetric 0/1 adjacency."""
    a = np.asarray(adjacency, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square (shape: {a.shape})")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    a_tilde = a + np.eye(a.shape[0])
    degree = a_tilde.sum(axis=1)
    assert (degree >= 1.0).all(), "self-loops guarantee every degree is at least 1"
    inv_sqrt = 1.0 / np.sqrt(degree)
    return a_tilde * inv_sqrt[:, None] * inv_sqrt[None, :]


def gcn_layer(h_prev: np.ndarray, adjacency: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """One propagation step ``ReLU(D^-1/2 (A + I) D^-1/2 H W)`` for a single graph."""
    if h_prev.shape[0] != adjacency.shape[0] or h_prev.shape[1] != weight.shape[0]:
        raise ValueError(
            f"shape mismatch: H {h_prev.shape}, A {np.shape(adjacency)}, W {weight.shape}"
        )
    return np.maximum(normalized_adjacency(adjacency) @ h_prev @ weight, 0.0)


class GraphGroup(NamedTuple):
    index: np.ndarray  # positions in the batch
    adj: np.ndarray  # [g, n, n] normalized adjacency
    ops: np.ndarray  # [g, n] generalized-op indices


class GraphBatch:
    """Graphs, epoch indices and labels, grouped by node count for batched propagation."""

    def __init__(
        self,
        adjacencies: Sequence[np.ndarray],
        op_indices: Sequence[Sequence[int]],
        epoch_indices: Sequence[int],
        labels: Optional[Sequence[float]] = None,
        *,
        normalized: bool = False,
    ) -> None:
        if not (len(adjacencies) == len(op_indices) == len(epoch_indices)):
            raise ValueError("adjacencies, op_indices and epoch_indices must have the same length")
        self.norm_adj = [np.asarray(a, dtype=float) if normalized else normalized_adjacency(a) for a in adjacencies]
        self.op_indices = [np.asarray(o, dtype=np.int64) for o in op_indices]
        for adj, ops in zip(self.norm_adj, self.op_indices):
            if ops.shape != (adj.shape[0],):
                raise ValueError(f"expected {adj.shape[0]} node operators (value: {ops.shape})")
            if ops.min(initial=0) < 0 or ops.max(initial=0) >= N_GENERALIZED_OPS:
                raise ValueError(f"operator index out of range (value: {ops.tolist()})")
        self.epoch_indices = np.asarray(epoch_indices, dtype=np.int64)
        self.labels = None if labels is None else np.asarray(labels, dtype=float)
        if self.labels is not None and self.labels.shape != self.epoch_indices.shape:
            raise ValueError("labels must match the number of graphs")
        self.groups = self._group()

    @classmethod
    def from_cells(
        cls,
        cells: Sequence[CellGraph],
        epoch_indices: Union[int, Sequence[int]],
        labels: Optional[Sequence[float]] = None,
    ) -> "GraphBatch":
        if isinstance(epoch_indices, (int, np.integer)):
            epoch_indices = [int(epoch_indices)] * len(cells)
        return cls(
            [c.skip.adjacency for c in cells],
            [c.op_indices for c in cells],
            epoch_indices,
            labels,
        )

    def _group(self) -> List[GraphGroup]:
        by_size: Dict[int, List[int]] = {}
        for i, ops in enumerate(self.op_indices):
            by_size.setdefault(len(ops), []).append(i)
        groups = []
        for n in sorted(by_size):
            index = np.asarray(by_size[n], dtype=np.int64)
            groups.append(GraphGroup(
                index,
                np.stack([self.norm_adj[i] for i in index]),
                np.stack([self.op_indices[i] for i in index]),
            ))
        return groups

    def __len__(self) -> int:
        return len(self.op_indices)

    def subset(self, index: Sequence[int]) -> "GraphBatch":
        index = list(index)
        return GraphBatch(
            [self.norm_adj[i] for i in index],
            [self.op_indices[i] for i in index],
            self.epoch_indices[index],
            None if self.labels is None else self.labels[index],
            normalized=True,
        )

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("batch has no labels")
        return self.labels


class _Cache(NamedTuple):
    gcn: list
    mlp: list
    u_last: np.ndarray
    logits: np.ndarray
    preds: np.ndarray
    bn_stats: list


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _forward(params: PredictorParams, batch: GraphBatch, training: bool) -> _Cache:
    cfg = params.config
    t = params.tensors
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.epoch_indices.min() < 0 or batch.epoch_indices.max() >= cfg.n_budget_levels:
        raise ValueError(f"epoch index out of range [0, {cfg.n_budget_levels - 1}]")

    readout = np.empty((len(batch), cfg.hidden))
    gcn_cache = []
    for group in batch.groups:
        h = t["op_embedding"][group.ops]
        propagated, pre = [], []
        for w in params.gcn_weights:
            ah = group.adj @ h
            z = ah @ w
            propagated.append(ah)
            pre.append(z)
            h = np.maximum(z, 0.0)
        arg = h.argmax(axis=1)
        readout[group.index] = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :]
        gcn_cache.append((group, propagated, pre, arg, h.shape))

    u = np.concatenate([readout, t["epoch_embedding"][batch.epoch_indices]], axis=1)
    mlp_cache = []
    bn_stats = []
    for i in range(2):
        z = u @ t[f"mlp_w{i}"] + t[f"mlp_b{i}"]
        if training:
            mean, var = z.mean(axis=0), z.var(axis=0)
            bn_stats.append((mean, var))
        else:
            mean, var = params.buffers[f"bn_mean{i}"], params.buffers[f"bn_var{i}"]
        inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
        x_hat = (z - mean) * inv_std
        y = t[f"bn_gamma{i}"] * x_hat + t[f"bn_beta{i}"]
        mlp_cache.append((u, x_hat, inv_std, y))
        u = np.maximum(y, 0.0)

    logits = (u @ t["mlp_w2"] + t["mlp_b2"])[:, 0]
    preds = _sigmoid(logits) if cfg.sigmoid_output else logits
    return _Cache(gcn_cache, mlp_cache, u, logits, preds, bn_stats)


def forward(params: PredictorParams, batch: GraphBatch, training: bool = False) -> np.ndarray:
    """Predicted accuracy of every graph in ``batch`` (inference statistics by default)."""
    return _forward(params, batch, training).preds


def forward_logits(params: PredictorParams, batch: GraphBatch, training: bool = False) -> np.ndarray:
    return _forward(params, batch, training).logits


def loss(params: PredictorParams, batch: GraphBatch, training: bool = True) -> float:
    """Mean squared error between predictions and labels."""
    labels = batch.require_labels()
    preds = forward(params, batch, training)
    return float(np.mean((preds - labels) ** 2))


def _backward(params: PredictorParams, batch: GraphBatch, training: bool):
    cfg = params.config
    t = params.tensors
    labels = batch.require_labels()
    cache = _forward(params, batch, training)
    n = len(batch)
    residual = cache.preds - labels
    value = float(np.mean(residual ** 2))

    grads = {k: np.zeros_like(v) for k, v in t.items()}
    d_out = 2.0 * residual / n
    if cfg.sigmoid_output:
        d_out = d_out * cache.preds * (1.0 - cache.preds)
    d_out = d_out[:, None]
    grads["mlp_w2"] = cache.u_last.T @ d_out
    grads["mlp_b2"] = d_out.sum(axis=0)
    du = d_out @ t["mlp_w2"].T

    for i in (1, 0):
        u_in, x_hat, inv_std, y = cache.mlp[i]
        dy = du * (y > 0.0)
        grads[f"bn_gamma{i}"] = (dy * x_hat).sum(axis=0)
        grads[f"bn_beta{i}"] = dy.sum(axis=0)
        dx_hat = dy * t[f"bn_gamma{i}"]
        if training:
            dz = inv_std / n * (n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0))
        else:
            dz = dx_hat * inv_std
        grads[f"mlp_w{i}"] = u_in.T @ dz
        grads[f"mlp_b{i}"] = dz.sum(axis=0)
        du = dz @ t[f"mlp_w{i}"].T

    d_readout = du[:, : cfg.hidden]
    np.add.at(grads["epoch_embedding"], batch.epoch_indices, du[:, cfg.hidden:])

    weights = params.gcn_weights
    for group, propagated, pre, arg, h_shape in cache.gcn:
        dh = np.zeros(h_shape)
        np.put_along_axis(dh, arg[:, None, :], d_readout[group.index][:, None, :], axis=1)
        for k in reversed(range(len(weights))):
            dz = dh * (pre[k] > 0.0)
            grads[f"gcn_{k}"] += np.einsum("gni,gnj->ij", propagated[k], dz)
            # normalized adjacency is symmetric
            dh = group.adj @ (dz @ weights[k].T)
        np.add.at(grads["op_embedding"], group.ops.ravel(), dh.reshape(-1, cfg.d_emb))

    return value, grads, cache.bn_stats


def backward(params: PredictorParams, batch: GraphBatch, training: bool = True) -> Dict[str, np.ndarray]:
    """Exact gradient of :func:`loss` with respect to every trainable tensor."""
    return _backward(params, batch, training)[1]


def train(
    params: PredictorParams,
    dataset: GraphBatch,
    config: Optional[TrainConfig] = None,
) -> Tuple[PredictorParams, List[float]]:
    """Mini-batch SGD with momentum; returns new params and the per-epoch mean training loss."""
    config = config if config is not None else params.config
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    dataset.require_labels()
    trained = params.copy()
    velocity = {k: np.zeros_like(v) for k, v in trained.tensors.items()}
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    n_batches = max(1, math.ceil(n / config.batch_size))
    trace: List[float] = []
    last_finite: Optional[float] = None

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for chunk in np.array_split(order, n_batches):
            batch = dataset.subset(chunk)
            value, grads, bn_stats = _backward(trained, batch, training=True)
            if not math.isfinite(value):
                raise PredictorDivergedError(epoch, last_finite)
            for name, grad in grads.items():
                velocity[name] = config.momentum * velocity[name] - config.learning_rate * grad
                trained.tensors[name] += velocity[name]
            for i, (mean, var) in enumerate(bn_stats):
                m = config.bn_momentum
                trained.buffers[f"bn_mean{i}"] = m * trained.buffers[f"bn_mean{i}"] + (1.0 - m) * mean
                trained.buffers[f"bn_var{i}"] = m * trained.buffers[f"bn_var{i}"] + (1.0 - m) * var
            total += value * len(chunk)
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise PredictorDivergedError(epoch, last_finite)
        last_finite = epoch_loss
        trace.append(epoch_loss)

    window = max(1, len(trace) // 5)
    if len(trace) >= 2 * window and np.mean(trace[-window:]) > np.mean(trace[:window]):
        logger.warning("predictor training loss rose from %.5f to %.5f", np.mean(trace[:window]), np.mean(trace[-window:]))
    logger.debug("predictor trained on %d rows, final loss %.6f", n, trace[-1])
    return trained, trace


def predict(params: PredictorParams, cells: Sequence[CellGraph], epoch_index: int) -> np.ndarray:
    if not cells:
        return np.empty(0)
    return forward(params, GraphBatch.from_cells(cells, epoch_index))


def rank_candidates(
    params: PredictorParams,
    candidates: Sequence[CellGraph],
    epoch_index: int,
) -> List[Tuple[CellGraph, float]]:
    """Candidates with their predicted accuracy, best first; ties keep input order."""
    scores = predict(params, candidates, epoch_index)
    order = sorted(range(len(candidates)), key=lambda i: -scores[i])
    return [(candidates[i], float(scores[i])) for i in order]


def predict_learning_curve(params: PredictorParams, cell: CellGraph) -> np.ndarray:
    """Predicted accuracy of ``cell`` at every budget level."""
    levels = params.config.n_budget_levels
    return forward(params, GraphBatch.from_cells([cell] * levels, list(range(levels))))


def suggest_budget(
    params: PredictorParams,
    cell: CellGraph,
    budgets: Sequence[int],
    tolerance: float = 0.005,
) -> int:
    """Smallest budget whose predicted accuracy is within ``tolerance`` of the best level."""
    curve = predict_learning_curve(params, cell)[: len(budgets)]
    best = float(curve.max())
    for budget, value in zip(budgets, curve):
        if value >= best - tolerance:
            return int(budget)
    return int(budgets[-1])


def evaluate_ranking(
    params: PredictorParams,
    cells: Sequence[CellGraph],
    labels: Sequence[float],
    epoch_index: int,
) -> Dict[str, float]:
    """Kendall tau, MSE and label variance of the predictor against known accuracies."""
    truth = np.asarray(labels, dtype=float)
    preds = predict(params, cells, epoch_index)
    return {
        "kendall_tau": float(stats.kendalltau(truth, preds).correlation),
        "mse": float(np.mean((preds - truth) ** 2)),
        "label_variance": float(np.var(truth)),
    }


def save_params(params: PredictorParams, path: Union[str, Path]) -> Path:
    """Write params as ``.npz``: little-endian float64 tensors plus a version and the config."""
    path = Path(path)
    arrays = {
        "format_version": np.array(FORMAT_VERSION, dtype="<i8"),
        "config": np.array(json.dumps(asdict(params.config), sort_keys=True)),
    }
    arrays.update({f"tensor__{k}": v.astype(TENSOR_DTYPE) for k, v in params.tensors.items()})
    arrays.update({f"buffer__{k}": v.astype(TENSOR_DTYPE) for k, v in params.buffers.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info("saved predictor params to %s", path)
    return path


def load_params(path: Union[str, Path]) -> PredictorParams:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported predictor format version {version} (expected {FORMAT_VERSION})")
        raw = json.loads(str(data["config"]))
        raw["mlp_widths"] = tuple(raw["mlp_widths"])
        config = TrainConfig(**raw)
        tensors = {k[len("tensor__"):]: data[k].astype(float) for k in data.files if k.startswith("tensor__")}
        buffers = {k[len("buffer__"):]: data[k].astype(float) for k in data.files if k.startswith("buffer__")}
    return PredictorParams(config, tensors, buffers)
