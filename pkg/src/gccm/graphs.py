"""Graph containers, synthetic benchmark generators and JSON Lines storage.

Three generators stand in for the usual benchmarks at desk scale:

* :func:`generate_sbm_cluster`, community detection on a stochastic block
  model where a fraction of nodes reveal their block in the features;
* :func:`generate_planted_pattern`, binary node classification of a
  planted dense subgraph;
* :func:`generate_triangle_regression`, graph regression of the triangle
  count per node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NODE_CLASSIFICATION = "node-classification"
GRAPH_CLASSIFICATION = "graph-classification"
GRAPH_REGRESSION = "graph-regression"
TASKS = (NODE_CLASSIFICATION, GRAPH_CLASSIFICATION, GRAPH_REGRESSION)
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""


def is_classification(task: str) -> bool:
    return task in (NODE_CLASSIFICATION, GRAPH_CLASSIFICATION)


def is_node_task(task: str) -> bool:
    return task == NODE_CLASSIFICATION


@dataclass
class Graph:
    """Node features ``x`` (n x d_x) and a symmetric 0/1 adjacency ``adj``."""

    x: np.ndarray
    adj: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.adj = np.asarray(self.adj, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1 or self.x.shape[1] < 1:
            raise ValueError(f"node features must be n x d_x with n, d_x >= 1, got {self.x.shape}")
        n = self.x.shape[0]
        if self.adj.shape != (n, n):
            raise ValueError(f"adjacency must be {n}x{n}, got {self.adj.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("node features contain NaN or Inf")
        if not np.array_equal(self.adj, self.adj.T):
            raise ValueError("adjacency is not symmetric")
        if np.any(np.diag(self.adj) != 0):
            raise ValueError("adjacency has self-loops")
        if not np.all((self.adj == 0) | (self.adj == 1)):
            raise ValueError("adjacency must be binary")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adj, k=1))
        return list(zip(i.tolist(), j.tolist()))


@dataclass
class LabeledInstance:
    graph: Graph
    task: str
    y: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        self.y = np.asarray(self.y, dtype=np.float64)
        rows = self.graph.n if is_node_task(self.task) else 1
        if self.y.ndim != 2 or self.y.shape[0] != rows:
            raise ValueError(f"{self.task} labels must have {rows} rows, got shape {self.y.shape}")
        if is_classification(self.task):
            if self.y.shape[1] < 2 or not _is_one_hot(self.y):
                raise ValueError("classification labels must be one-hot rows with K >= 2")
        elif self.y.shape[1] != 1:
            raise ValueError("regression labels must have d_k = 1")

    @property
    def d_k(self) -> int:
        return self.y.shape[1]


def _is_one_hot(y: np.ndarray) -> bool:
    return bool(np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1))


@dataclass
class Dataset:
    instances: list[LabeledInstance] = field(default_factory=list)

    def __post_init__(self):
        if self.instances:
            t, k = self.instances[0].task, self.instances[0].d_k
            for inst in self.instances:
                if inst.task != t or inst.d_k != k:
                    raise ValueError("all instances must share task and label dimension")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def task(self) -> str | None:
        return self.instances[0].task if self.instances else None

    @property
    def d_k(self) -> int | None:
        return self.instances[0].d_k if self.instances else None

    @property
    def d_x(self) -> int | None:
        return self.instances[0].graph.d_x if self.instances else None

    def split(self, name: str) -> list[LabeledInstance]:
        return [inst for inst in self.instances if inst.split == name]


# -- generators ----------------------------------------------------------


def _graph_rngs(rng: np.random.Generator, n_graphs: int) -> list[np.random.Generator]:
    # one independent stream per graph, so graphs can be generated in any order
    return rng.spawn(n_graphs)


def _sample_symmetric(prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = prob.shape[0]
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    adj = (upper | upper.T).astype(np.float64)
    return adj


def generate_sbm_cluster(
    n_graphs: int,
    nodes_per_graph: int,
    n_classes: int,
    p_in: float,
    p_out: float,
    seed_fraction: float,
    rng: np.random.Generator,
    splits: tuple[float, float, float] | None = None,
) -> Dataset:
    """Stochastic-block-model graphs for node classification.

    Nodes are split evenly into ``n_classes`` blocks.  Each node's label is
    its block.  A ``seed_fraction`` of nodes carry their block one-hot plus
    a revealed flag in the last feature column; the rest have all-zero
    features.
    """
    if not 0 <= p_out < p_in <= 1:
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if not 0 < seed_fraction <= 1:
        raise ValueError("seed_fraction must lie in (0, 1]")
    if nodes_per_graph < n_classes:
        raise ValueError("need at least one node per block")
    instances = []
    for g_rng in _graph_rngs(rng, n_graphs):
        blocks = np.arange(nodes_per_graph) % n_classes
        g_rng.shuffle(blocks)
        same = blocks[:, None] == blocks[None, :]
        adj = _sample_symmetric(np.where(same, p_in, p_out), g_rng)
        y = np.eye(n_classes)[blocks]
        n_seed = max(1, int(round(seed_fraction * nodes_per_graph)))
        seeds = g_rng.choice(nodes_per_graph, size=n_seed, replace=False)
        x = np.zeros((nodes_per_graph, n_classes + 1))
        x[seeds, :n_classes] = y[seeds]
        x[seeds, n_classes] = 1.0
        instances.append(LabeledInstance(Graph(x, adj), NODE_CLASSIFICATION, y))
    return _with_splits(Dataset(instances), splits, rng)


def generate_planted_pattern(
    n_graphs: int,
    nodes_per_graph: int,
    pattern_size: int,
    p_bg: float,
    p_pattern: float,
    rng: np.random.Generator,
    splits: tuple[float, float, float] | None = None,
) -> Dataset:
    """Erdos-Renyi background with a planted dense subgraph labelled 1."""
    if not 0 < pattern_size < nodes_per_graph:
        raise ValueError("pattern_size must be positive and smaller than nodes_per_graph")
    if p_pattern <= p_bg:
        raise ValueError(f"need p_pattern > p_bg, got {p_pattern} <= {p_bg}")
    instances = []
    for g_rng in _graph_rngs(rng, n_graphs):
        adj = _sample_symmetric(np.full((nodes_per_graph, nodes_per_graph), p_bg), g_rng)
        members = g_rng.choice(nodes_per_graph, size=pattern_size, replace=False)
        sub = _sample_symmetric(np.full((pattern_size, pattern_size), p_pattern), g_rng)
        adj[np.ix_(members, members)] = sub
        labels = np.zeros(nodes_per_graph, dtype=int)
        labels[members] = 1
        x = (adj.sum(axis=1) / (nodes_per_graph - 1)).reshape(-1, 1)
        instances.append(LabeledInstance(Graph(x, adj), NODE_CLASSIFICATION, np.eye(2)[labels]))
    return _with_splits(Dataset(instances), splits, rng)


def count_triangles(adj: np.ndarray) -> int:
    a = np.asarray(adj, dtype=np.float64)
    return int(round(np.trace(a @ a @ a) / 6))


def generate_triangle_regression(
    n_graphs: int,
    nodes_range: tuple[int, int],
    p_edge: float,
    rng: np.random.Generator,
    splits: tuple[float, float, float] | None = None,
) -> Dataset:
    """Erdos-Renyi graphs labelled with (triangle count) / n."""
    if not 0 < p_edge < 1:
        raise ValueError("p_edge must lie in (0, 1)")
    lo, hi = nodes_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid nodes_range {nodes_range}")
    instances = []
    for g_rng in _graph_rngs(rng, n_graphs):
        n = int(g_rng.integers(lo, hi + 1))
        adj = _sample_symmetric(np.full((n, n), p_edge), g_rng)
        instances.append(triangle_instance(adj))
    return _with_splits(Dataset(instances), splits, rng)


def triangle_instance(adj: np.ndarray, split: str = "train") -> LabeledInstance:
    n = adj.shape[0]
    x = (adj.sum(axis=1) / max(n - 1, 1)).reshape(-1, 1)
    y = np.array([[count_triangles(adj) / n]])
    return LabeledInstance(Graph(x, adj), GRAPH_REGRESSION, y, split)


# -- splits --------------------------------------------------------------


def _stratum(inst: LabeledInstance) -> int:
    if inst.task == GRAPH_CLASSIFICATION:
        return int(np.argmax(inst.y[0]))
    return 0


def assign_splits(dataset: Dataset, fractions: Sequence[float], rng: np.random.Generator) -> Dataset:
    """Assign train/val/test tags, stratified by class for graph classification.

    Within each stratum the split counts are rounded independently, so every
    stratum's proportions match ``fractions`` to within one instance.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    strata: dict[int, list[int]] = {}
    for i, inst in enumerate(dataset.instances):
        strata.setdefault(_stratum(inst), []).append(i)
    for key in sorted(strata):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        n = len(idx)
        n_train = int(round(fr[0] * n))
        n_val = min(int(round(fr[1] * n)), n - n_train)
        for pos, i in enumerate(idx):
            dataset.instances[i].split = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")
    return dataset


def _with_splits(dataset: Dataset, splits, rng: np.random.Generator) -> Dataset:
    if splits is not None:
        assign_splits(dataset, splits, rng)
    return dataset


# -- persistence ---------------------------------------------------------


def instance_to_record(inst: LabeledInstance) -> dict:
    g = inst.graph
    return {
        "n": g.n,
        "task": inst.task,
        "x": g.x.ravel().tolist(),
        "d_x": g.d_x,
        "adj": [list(e) for e in g.edges()],
        "y": inst.y.ravel().tolist(),
        "d_k": inst.d_k,
        "split": inst.split,
    }


def record_to_instance(rec: dict) -> LabeledInstance:
    n, d_x, d_k = int(rec["n"]), int(rec["d_x"]), int(rec["d_k"])
    x = np.asarray(rec["x"], dtype=np.float64)
    if x.size != n * d_x:
        raise ValueError(f"expected {n * d_x} feature values, got {x.size}")
    adj = np.zeros((n, n))
    for e in rec["adj"]:
        i, j = int(e[0]), int(e[1])
        if not 0 <= i < j < n:
            raise ValueError(f"bad edge {e}; need 0 <= i < j < n")
        adj[i, j] = adj[j, i] = 1.0
    y = np.asarray(rec["y"], dtype=np.float64)
    rows = n if rec["task"] == NODE_CLASSIFICATION else 1
    if y.size != rows * d_k:
        raise ValueError(f"expected {rows * d_k} label values, got {y.size}")
    return LabeledInstance(Graph(x.reshape(n, d_x), adj), rec["task"], y.reshape(rows, d_k), rec["split"])


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in dataset.instances:
            fh.write(json.dumps(instance_to_record(inst)) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if not line.endswith("\n"):
                # every record is newline-terminated; a missing newline means truncation
                raise DatasetFormatError(f"{path}: line {lineno}: truncated record")
            try:
                instances.append(record_to_instance(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
    try:
        return Dataset(instances)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if len(a) != len(b):
        return False
    for p, q in zip(a.instances, b.instances):
        if (p.task, p.split) != (q.task, q.split):
            return False
        if not (np.array_equal(p.y, q.y) and np.array_equal(p.graph.x, q.graph.x)):
            return False
        if not np.array_equal(p.graph.adj, q.graph.adj):
            return False
    return True


def summarize(dataset: Dataset) -> dict:
    """Counts per split and class balance, for printing after generation."""
    out: dict = {"records": len(dataset), "task": dataset.task}
    out["splits"] = {s: len(dataset.split(s)) for s in SPLITS}
    if dataset.task and is_classification(dataset.task):
        counts = np.zeros(dataset.d_k)
        for inst in dataset.instances:
            counts += inst.y.sum(axis=0)
        out["class_balance"] = (counts / counts.sum()).round(4).tolist()
    return out


def iter_batches(items: Sequence, size: int) -> Iterable[Sequence]:
    for start in range(0, len(items), size):
        yield items[start : start + size]
