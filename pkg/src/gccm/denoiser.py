"""Conditional denoising network over a batch of graphs.

The network fuses the noisy label, the timestep and the node features
additively::

    H0 = Y_t W_y + t_emb(t) W_t + X W_x

then runs ``n_layers`` residual message-passing rounds
``H <- tanh(A_hat H W_l + b_l) + H`` with the self-loop symmetric-normalised
adjacency ``A_hat``, and reads out a label prediction and a contrastive
latent from the same ``H``.

Graphs are batched as a disjoint union: features are stacked, ``A_hat`` is
block diagonal, and graph-level readouts use a mean-pooling matrix.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import Graph, is_classification, is_node_task


@dataclass(frozen=True)
class ModelConfig:
    task: str
    d_x: int
    d_k: int
    d_h: int = 32
    d_z: int = 32
    n_layers: int = 3
    T: int = 1000

    @property
    def d_t(self) -> int:
        return self.d_h

    def shapes(self) -> dict[str, tuple[int, int]]:
        d_h = self.d_h
        out = {"W_y": (self.d_k, d_h), "W_t": (self.d_t, d_h), "W_x": (self.d_x, d_h)}
        for layer in range(self.n_layers):
            out[f"enc{layer}_W"] = (d_h, d_h)
            out[f"enc{layer}_b"] = (1, d_h)
        out["proj_p_W"] = (d_h, self.d_k)
        out["proj_p_b"] = (1, self.d_k)
        out["proj_c_W1"] = (d_h, d_h)
        out["proj_c_b1"] = (1, d_h)
        out["proj_c_W2"] = (d_h, self.d_z)
        out["proj_c_b2"] = (1, self.d_z)
        return out

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


Params = dict[str, np.ndarray]


def init_params(config: ModelConfig, rng: np.random.Generator, shortcut: bool = False) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights and zero biases.

    With ``shortcut=True`` the label and timestep projections start at zero.
    """
    params: Params = {}
    for name, shape in config.shapes().items():
        if name.rsplit("_", 1)[-1].startswith("b"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return make_shortcut(params) if shortcut else params


def make_shortcut(params: Mapping[str, np.ndarray]) -> Params:
    """Copy of ``params`` with W_y = 0 and W_t = 0."""
    out = {k: np.array(v, copy=True) for k, v in params.items()}
    out["W_y"] = np.zeros_like(out["W_y"])
    out["W_t"] = np.zeros_like(out["W_t"])
    return out


def as_tensors(params: Mapping[str, np.ndarray | Tensor], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# -- batching ------------------------------------------------------------


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    a = np.asarray(adj, dtype=np.float64) + np.eye(adj.shape[0])
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


@dataclass
class GraphBatch:
    """A disjoint union of graphs ready for the network."""

    x: np.ndarray
    adj_norm: np.ndarray
    node_graph: np.ndarray
    sizes: tuple[int, ...]

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> GraphBatch:
        if not graphs:
            raise ValueError("cannot batch zero graphs")
        sizes = tuple(g.n for g in graphs)
        n = sum(sizes)
        adj = np.zeros((n, n))
        start = 0
        for g in graphs:
            adj[start : start + g.n, start : start + g.n] = normalized_adjacency(g.adj)
            start += g.n
        x = np.concatenate([g.x for g in graphs], axis=0)
        node_graph = np.repeat(np.arange(len(graphs)), sizes)
        return cls(x, adj, node_graph, sizes)

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def n_graphs(self) -> int:
        return len(self.sizes)

    @property
    def expand(self) -> np.ndarray:
        """N x G indicator broadcasting graph rows to their nodes."""
        e = np.zeros((self.n_nodes, self.n_graphs))
        e[np.arange(self.n_nodes), self.node_graph] = 1.0
        return e

    @property
    def pool(self) -> np.ndarray:
        """G x N column-mean pooling matrix."""
        return self.expand.T / np.asarray(self.sizes, dtype=np.float64)[:, None]

    def with_features(self, x: np.ndarray) -> GraphBatch:
        if x.shape != self.x.shape:
            raise ValueError(f"replacement features have shape {x.shape}, expected {self.x.shape}")
        return GraphBatch(np.asarray(x, dtype=np.float64), self.adj_norm, self.node_graph, self.sizes)

    def graph_slices(self) -> list[slice]:
        bounds = np.concatenate([[0], np.cumsum(self.sizes)])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


# -- network pieces ------------------------------------------------------


def timestep_embedding(t, d_t: int, T: int) -> np.ndarray:
    """Sinusoidal embedding, one row per entry of ``t``.

    Frequencies are geometrically spaced so that the periods run from 1 to
    10 T.
    """
    if d_t % 2:
        raise ValueError(f"timestep embedding width must be even, got {d_t}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d_t // 2
    if half == 1:
        omegas = np.array([1.0])
    else:
        omegas = (10.0 * T) ** (np.arange(half) / (half - 1))
    angles = t[:, None] / omegas[None, :]
    emb = np.empty((t.size, d_t))
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    return emb


@dataclass
class FusionTerms:
    label: Tensor
    time: Tensor
    feature: Tensor


def fuse(y_t_nodes: np.ndarray, t_nodes_emb: np.ndarray | Tensor, x: np.ndarray, p: Mapping[str, Tensor]) -> tuple[Tensor, FusionTerms]:
    """Additive fusion; returns H0 and its three addends."""
    y = Tensor(y_t_nodes)
    label = y @ p["W_y"]
    time = (t_nodes_emb if isinstance(t_nodes_emb, Tensor) else Tensor(t_nodes_emb)) @ p["W_t"]
    feature = Tensor(x) @ p["W_x"]
    if not label.shape == time.shape == feature.shape:
        raise ad.ShapeError(f"fuse: addend shapes differ: {label.shape}, {time.shape}, {feature.shape}")
    return label + time + feature, FusionTerms(label, time, feature)


def encode(h0: Tensor, adj_norm: np.ndarray, p: Mapping[str, Tensor], n_layers: int) -> Tensor:
    a = Tensor(adj_norm)
    h = h0
    for layer in range(n_layers):
        h = ad.tanh(a @ h @ p[f"enc{layer}_W"] + p[f"enc{layer}_b"]) + h
    return h


def predict_head(h: Tensor, task: str, p: Mapping[str, Tensor], pool: np.ndarray | None = None) -> tuple[Tensor, Tensor | None]:
    """Label readout; returns (prediction, log-probabilities or None)."""
    if not is_node_task(task):
        h = Tensor(pool) @ h if pool is not None else ad.col_mean(h)
    logits = h @ p["proj_p_W"] + p["proj_p_b"]
    if is_classification(task):
        return ad.row_softmax(logits), ad.row_log_softmax(logits)
    return logits, None


def contrastive_head(h: Tensor, task: str, p: Mapping[str, Tensor], pool: np.ndarray | None = None) -> Tensor:
    if not is_node_task(task):
        h = Tensor(pool) @ h if pool is not None else ad.col_mean(h)
    hidden = ad.tanh(h @ p["proj_c_W1"] + p["proj_c_b1"])
    return hidden @ p["proj_c_W2"] + p["proj_c_b2"]


@dataclass
class DenoiserOutput:
    y_hat: Tensor
    z: Tensor
    h0: Tensor
    h: Tensor
    fusion: FusionTerms
    log_probs: Tensor | None = None


def denoise(
    params: Mapping[str, np.ndarray | Tensor],
    config: ModelConfig,
    batch: GraphBatch,
    y_t: np.ndarray,
    t,
) -> DenoiserOutput:
    """One pass of the network.

    ``y_t`` has one row per node (node tasks) or per graph (graph tasks);
    graph rows are broadcast to their nodes before fusion.  ``t`` is a
    step per graph, or a single step shared by the whole batch.
    """
    p = as_tensors(params)
    y_t = np.atleast_2d(np.asarray(y_t, dtype=np.float64))
    node_task = is_node_task(config.task)
    want_rows = batch.n_nodes if node_task else batch.n_graphs
    if y_t.shape != (want_rows, config.d_k):
        raise ad.ShapeError(f"denoise: noisy labels have shape {y_t.shape}, expected {(want_rows, config.d_k)}")
    if batch.x.shape[1] != config.d_x:
        raise ad.ShapeError(f"denoise: features have width {batch.x.shape[1]}, expected {config.d_x}")
    steps = np.broadcast_to(np.atleast_1d(np.asarray(t)), (batch.n_graphs,))
    if np.any(steps < 1) or np.any(steps > config.T):
        raise ValueError(f"timesteps must lie in [1, {config.T}]")
    y_nodes = y_t if node_task else y_t[batch.node_graph]
    t_nodes = timestep_embedding(steps, config.d_t, config.T)[batch.node_graph]
    h0, terms = fuse(y_nodes, t_nodes, batch.x, p)
    h = encode(h0, batch.adj_norm, p, config.n_layers)
    pool = None if node_task else batch.pool
    y_hat, log_probs = predict_head(h, config.task, p, pool)
    z = contrastive_head(h, config.task, p, pool)
    return DenoiserOutput(y_hat, z, h0, h, terms, log_probs)


def deterministic_predict(params: Mapping[str, np.ndarray], config: ModelConfig, batch: GraphBatch) -> DenoiserOutput:
    """Network reduced to a feature-only predictor: H0 = X W_x.

    This is the map the denoiser collapses to when W_y = 0 and W_t = 0.
    """
    p = as_tensors(params)
    feature = Tensor(batch.x) @ p["W_x"]
    zero = Tensor(np.zeros(feature.shape))
    h = encode(feature, batch.adj_norm, p, config.n_layers)
    pool = None if is_node_task(config.task) else batch.pool
    y_hat, log_probs = predict_head(h, config.task, p, pool)
    z = contrastive_head(h, config.task, p, pool)
    return DenoiserOutput(y_hat, z, feature, h, FusionTerms(zero, zero, feature), log_probs)


# -- checkpoints ---------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], config: ModelConfig, extra: dict | None = None) -> None:
    payload = {
        "format": "gccm-checkpoint/1",
        "config": asdict(config),
        "config_hash": config.digest(),
        "params": {k: {"shape": list(v.shape), "values": np.asarray(v).ravel().tolist()} for k, v in params.items()},
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> tuple[Params, ModelConfig, dict]:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from exc
    config = ModelConfig(**payload["config"])
    if payload.get("config_hash") != config.digest():
        raise CheckpointError(f"{path}: config hash does not match stored config")
    if expect is not None and expect != config:
        raise CheckpointError(f"{path}: checkpoint was built for {config}, expected {expect}")
    shapes = config.shapes()
    stored = payload["params"]
    if set(stored) != set(shapes):
        raise CheckpointError(f"{path}: parameter names differ from the model layout")
    params: Params = {}
    for name, shape in shapes.items():
        entry = stored[name]
        if tuple(entry["shape"]) != shape or len(entry["values"]) != shape[0] * shape[1]:
            raise CheckpointError(f"{path}: {name} has shape {entry['shape']}, expected {list(shape)}")
        params[name] = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
    return params, config, payload.get("extra", {})
