"""Training loop, variants of the consistency objective, and Adam.

Variants:

``diffusion``
    plain denoising: one step per graph, cross-entropy against the clean
    label (discrete labels) or MSE against the injected noise (Gaussian).
``pcl``
    two noisy views at ``t1`` and ``t2 = max(1, floor(alpha t1))``, both
    boundary terms plus the MSE between the two predictions.
``pcl-contrastive``
    as ``pcl`` but the consistency term is InfoNCE between latents.
``gccm``
    ``pcl-contrastive`` with independent feature perturbations per view.
``supervised``
    the two boundary terms alone; a reference for the nesting property.

Every random draw comes from a stream keyed by ``(seed, epoch, instance
index, purpose)``, so the views an instance sees do not depend on batch
composition or on which variant is running.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import GraphBatch, ModelConfig, Params, as_tensors, denoise, init_params
from .diffusion import CONTINUOUS, DISCRETE, LabelDiffusion, perturb_features, schedule_for
from .graphs import Dataset, LabeledInstance, is_classification, is_node_task
from .inference import iterative_denoise, one_step_predict
from .objectives import LossBreakdown, boundary_loss, gccm_objective, pcl_objective

VARIANTS = ("diffusion", "pcl", "pcl-contrastive", "gccm", "supervised")
CLI_VARIANTS = VARIANTS[:4]
PERTURB_KINDS = ("none", CONTINUOUS, DISCRETE)
METRIC_COLUMNS = (
    "epoch",
    "step",
    "variant",
    "t1",
    "t2",
    "boundary_t1",
    "boundary_t2",
    "consistency",
    "total",
    "val_metric",
)

# purpose tags for the random streams
_INIT, _SHUFFLE, _STEPS, _LABEL1, _LABEL2, _PERTURB1, _PERTURB2, _SUBSAMPLE, _VALIDATE = range(9)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "gccm"
    T: int = 1000
    alpha: float = 0.2
    lambda1: float = 1.0
    lambda2: float = 0.1
    tau: float = 0.5
    T_per: int = 10
    perturb_kind: str = CONTINUOUS
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    n_layers: int = 3
    d_h: int = 32
    d_z: int = 32
    contrastive_nodes: int = 64
    val_steps: int = 50

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.perturb_kind not in PERTURB_KINDS:
            raise ValueError(f"unknown perturbation kind {self.perturb_kind!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("T", "T_per", "batch_size", "d_h", "d_z", "contrastive_nodes", "val_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.T_per > self.T:
            raise ValueError("T_per cannot exceed T")
        if self.epochs < 0 or self.n_layers < 0:
            raise ValueError("epochs and n_layers must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @property
    def perturbs(self) -> bool:
        return self.variant == "gccm" and self.perturb_kind != "none"

    def model_config(self, task: str, d_x: int, d_k: int) -> ModelConfig:
        return ModelConfig(task, d_x, d_k, self.d_h, self.d_z, self.n_layers, self.T)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def sample_timestep_pair(T: int, alpha: float, rng: np.random.Generator) -> tuple[int, int]:
    t1 = int(rng.integers(1, T + 1))
    return t1, t2_for(t1, alpha)


def t2_for(t1: int, alpha: float) -> int:
    return max(1, math.floor(alpha * t1))


# -- optimizer -----------------------------------------------------------


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> AdamMoments:
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    moments: AdamMoments,
    lr: float,
    step: int,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[Params, AdamMoments]:
    """One bias-corrected Adam step; ``step`` counts from 1."""
    if step < 1:
        raise ValueError("Adam step counter starts at 1")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ad.ShapeError(f"adam_update: gradient {g.shape} vs parameter {params[name].shape} for {name}")
    b1, b2 = betas
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * moments.m[name] + (1 - b1) * g
        v = b2 * moments.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamMoments(new_m, new_v)


# -- state ---------------------------------------------------------------


@dataclass
class TrainState:
    params: Params
    model_config: ModelConfig
    moments: AdamMoments
    epoch: int = 0
    step: int = 0
    best_params: Params | None = None
    best_metric: float | None = None
    best_epoch: int | None = None
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, model_config: ModelConfig, config: TrainConfig) -> TrainState:
        params = init_params(model_config, stream(config.seed, _INIT))
        return cls(params, model_config, AdamMoments.zeros_like(params))


# -- views ---------------------------------------------------------------


@dataclass
class ViewPair:
    """Everything random about one training step, drawn before any forward pass."""

    batch: GraphBatch
    y0: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    y_t1: np.ndarray
    y_t2: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    eps1: np.ndarray | None = None
    index: np.ndarray | None = None


def label_process(config: TrainConfig, task: str, d_k: int) -> LabelDiffusion:
    return LabelDiffusion.for_task(is_classification(task), config.T, d_k)


def draw_views(
    items: Sequence[tuple[int, LabeledInstance]],
    config: TrainConfig,
    process: LabelDiffusion,
    epoch: int,
    step: int,
) -> ViewPair:
    if not items:
        raise ValueError("empty training batch")
    task = items[0][1].task
    batch = GraphBatch.from_graphs([inst.graph for _, inst in items])
    single = config.variant == "diffusion"
    per_sched = schedule_for(config.perturb_kind, config.T).head(config.T_per) if config.perturbs else None
    t1s, t2s, y1s, y2s, x1s, x2s, e1s = [], [], [], [], [], [], []
    for idx, inst in items:
        if single:
            t1 = int(stream(config.seed, epoch, idx, _STEPS).integers(1, config.T + 1))
            t2 = t1
        else:
            t1, t2 = sample_timestep_pair(config.T, config.alpha, stream(config.seed, epoch, idx, _STEPS))
        v1 = process.sample(inst.y, t1, stream(config.seed, epoch, idx, _LABEL1))
        v2 = process.sample(inst.y, t2, stream(config.seed, epoch, idx, _LABEL2))
        t1s.append(t1)
        t2s.append(t2)
        y1s.append(v1.y_t)
        y2s.append(v2.y_t)
        e1s.append(v1.eps)
        x = inst.graph.x
        if per_sched is not None:
            x1s.append(perturb_features(x, config.perturb_kind, config.T_per, per_sched, stream(config.seed, epoch, idx, _PERTURB1)))
            x2s.append(perturb_features(x, config.perturb_kind, config.T_per, per_sched, stream(config.seed, epoch, idx, _PERTURB2)))
        else:
            x1s.append(x)
            x2s.append(x)
    y0 = np.concatenate([inst.y for _, inst in items], axis=0)
    index = None
    if is_node_task(task) and config.variant in ("pcl-contrastive", "gccm") and y0.shape[0] > config.contrastive_nodes:
        rng = stream(config.seed, epoch, step, _SUBSAMPLE)
        index = np.sort(rng.choice(y0.shape[0], size=config.contrastive_nodes, replace=False))
    eps1 = None if e1s[0] is None else np.concatenate(e1s, axis=0)
    return ViewPair(
        batch,
        y0,
        np.array(t1s),
        np.array(t2s),
        np.concatenate(y1s, axis=0),
        np.concatenate(y2s, axis=0),
        np.concatenate(x1s, axis=0),
        np.concatenate(x2s, axis=0),
        eps1,
        index,
    )


# -- losses --------------------------------------------------------------


def diffusion_loss(out_y_hat: Tensor, log_probs: Tensor | None, views: ViewPair, task: str) -> LossBreakdown:
    if is_classification(task):
        loss = boundary_loss(out_y_hat, views.y0, task, log_probs)
    else:
        loss = ad.square(out_y_hat - Tensor(views.eps1)).mean()
    value = loss.item()
    return LossBreakdown(value, 0.0, 0.0, value, 1.0, 0.0, None, loss=loss)


def supervised_objective(out_t1, out_t2, y: np.ndarray, lambda1: float, task: str) -> LossBreakdown:
    b1 = boundary_loss(out_t1.y_hat, y, task, out_t1.log_probs)
    b2 = boundary_loss(out_t2.y_hat, y, task, out_t2.log_probs)
    total = (b1 + b2) * lambda1
    return LossBreakdown(b1.item(), b2.item(), 0.0, total.item(), lambda1, 0.0, None, loss=total)


def variant_loss(params: Mapping[str, np.ndarray | Tensor], model_config: ModelConfig, config: TrainConfig, views: ViewPair) -> LossBreakdown:
    """The differentiable objective of ``config.variant`` on pre-drawn views."""
    task = model_config.task
    out1 = denoise(params, model_config, views.batch.with_features(views.x1), views.y_t1, views.t1)
    if config.variant == "diffusion":
        return diffusion_loss(out1.y_hat, out1.log_probs, views, task)
    out2 = denoise(params, model_config, views.batch.with_features(views.x2), views.y_t2, views.t2)
    if config.variant == "pcl":
        return pcl_objective(out1, out2, views.y0, config.lambda1, config.lambda2, task)
    if config.variant == "supervised":
        return supervised_objective(out1, out2, views.y0, config.lambda1, task)
    return gccm_objective(out1, out2, views.y0, config.lambda1, config.lambda2, config.tau, task, views.index)


def _step(items, state: TrainState, config: TrainConfig, process: LabelDiffusion | None) -> tuple[LossBreakdown, ViewPair]:
    mc = state.model_config
    process = process or label_process(config, mc.task, mc.d_k)
    views = draw_views(items, config, process, state.epoch, state.step)
    leaves = as_tensors(state.params, requires_grad=True)
    breakdown = variant_loss(leaves, mc, config, views)
    if not math.isfinite(breakdown.total):
        raise TrainingDiverged(
            f"non-finite loss at epoch {state.epoch}, step {state.step}: "
            f"boundary=({breakdown.boundary_t1}, {breakdown.boundary_t2}), consistency={breakdown.consistency}"
        )
    breakdown.loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(state.params[k])) for k, t in leaves.items()}
    state.step += 1
    state.params, state.moments = adam_update(state.params, grads, state.moments, config.learning_rate, state.step)
    return breakdown, views


def _require_variant(config: TrainConfig, allowed: tuple[str, ...]) -> None:
    if config.variant not in allowed:
        raise ValueError(f"this step function handles {allowed}, not {config.variant!r}")


def train_step_gccm(items, state: TrainState, config: TrainConfig, process: LabelDiffusion | None = None) -> LossBreakdown:
    """Contrastive consistency step; also serves ``pcl-contrastive``."""
    _require_variant(config, ("gccm", "pcl-contrastive"))
    return _step(items, state, config, process)[0]


def train_step_pcl(items, state: TrainState, config: TrainConfig, process: LabelDiffusion | None = None) -> LossBreakdown:
    """Self-consistency step; also serves the ``supervised`` reference."""
    _require_variant(config, ("pcl", "supervised"))
    return _step(items, state, config, process)[0]


def train_step_diffusion(items, state: TrainState, config: TrainConfig, process: LabelDiffusion | None = None) -> LossBreakdown:
    _require_variant(config, ("diffusion",))
    return _step(items, state, config, process)[0]


# -- evaluation ----------------------------------------------------------


def higher_is_better(task: str) -> bool:
    return is_classification(task)


def score(pred: np.ndarray, target: np.ndarray, task: str) -> float:
    """Accuracy for classification, mean absolute error for regression."""
    if is_classification(task):
        return float(np.mean(pred.argmax(axis=1) == target.argmax(axis=1)))
    return float(np.mean(np.abs(pred - target)))


def evaluate(
    params: Params,
    model_config: ModelConfig,
    config: TrainConfig,
    instances: Sequence[LabeledInstance],
    rng: np.random.Generator,
    batch_size: int = 64,
) -> float:
    """Validation metric via one-step inference.

    Regression models trained with the noise-prediction objective cannot
    be read out in one step, so they are scored by strided iterative
    denoising with ``config.val_steps`` steps instead.
    """
    process = label_process(config, model_config.task, model_config.d_k)
    preds, targets = [], []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start : start + batch_size]
        batch = GraphBatch.from_graphs([inst.graph for inst in chunk])
        if config.variant == "diffusion" and not is_classification(model_config.task):
            res = iterative_denoise(params, model_config, batch, process, min(config.val_steps, config.T), rng, parameterization="eps")
        else:
            res = one_step_predict(params, model_config, batch, process, rng)
        preds.append(res.y_hat)
        targets.append(np.concatenate([inst.y for inst in chunk], axis=0))
    return score(np.concatenate(preds), np.concatenate(targets), model_config.task)


# -- loop ----------------------------------------------------------------


def _row(state: TrainState, config: TrainConfig, bd: LossBreakdown, views: ViewPair) -> dict:
    return {
        "epoch": state.epoch,
        "step": state.step,
        "variant": config.variant,
        "t1": float(np.mean(views.t1)),
        "t2": float(np.mean(views.t2)),
        "boundary_t1": bd.boundary_t1,
        "boundary_t2": bd.boundary_t2,
        "consistency": bd.consistency,
        "total": bd.total,
        "lambda1": bd.lambda1,
        "lambda2": bd.lambda2,
        "val_metric": None,
    }


def train(
    dataset: Dataset,
    config: TrainConfig,
    on_epoch: Callable[[TrainState, float | None], None] | None = None,
) -> TrainState:
    """Fixed-budget training with a best-on-validation snapshot.

    The train split is reshuffled each epoch.  When the dataset has a
    validation split its metric is written into the last history row of
    each epoch and drives the snapshot; otherwise the snapshot is the
    final parameters.
    """
    task, d_x, d_k = dataset.task, dataset.d_x, dataset.d_k
    if task is None:
        raise ValueError("cannot train on an empty dataset")
    if config.variant in ("gccm",) and config.perturb_kind == DISCRETE:
        bad = [i for i, inst in enumerate(dataset.instances) if not _rows_one_hot(inst.graph.x)]
        if bad:
            raise ValueError(f"discrete feature perturbation needs one-hot feature rows; instance {bad[0]} has others")
    mc = config.model_config(task, d_x, d_k)
    state = TrainState.fresh(mc, config)
    process = label_process(config, task, d_k)
    train_idx = [i for i, inst in enumerate(dataset.instances) if inst.split == "train"]
    if not train_idx:
        raise ValueError("dataset has no training instances")
    val = dataset.split("val")
    better = higher_is_better(task)
    for epoch in range(config.epochs):
        state.epoch = epoch
        order = stream(config.seed, epoch, _SHUFFLE).permutation(train_idx)
        for start in range(0, len(order), config.batch_size):
            items = [(int(i), dataset.instances[int(i)]) for i in order[start : start + config.batch_size]]
            bd, views = _step(items, state, config, process)
            state.history.append(_row(state, config, bd, views))
        metric = None
        if val:
            metric = evaluate(state.params, mc, config, val, stream(config.seed, epoch, _VALIDATE))
            state.history[-1]["val_metric"] = metric
            if state.best_metric is None or (metric > state.best_metric if better else metric < state.best_metric):
                state.best_metric, state.best_epoch = metric, epoch
                state.best_params = {k: v.copy() for k, v in state.params.items()}
        if on_epoch is not None:
            on_epoch(state, metric)
    if config.epochs > 0:
        state.epoch = config.epochs
    if state.best_params is None:
        state.best_params = {k: v.copy() for k, v in state.params.items()}
        state.best_epoch = state.epoch - 1 if config.epochs else None
    return state


def _rows_one_hot(x: np.ndarray) -> bool:
    return bool(np.all((x == 0) | (x == 1)) and np.all(x.sum(axis=1) == 1))


def write_metrics_csv(history: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow(["" if row.get(c) is None else _fmt(row[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path: str | Path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec: dict = {"epoch": int(row["epoch"]), "step": int(row["step"]), "variant": row["variant"]}
            for c in METRIC_COLUMNS[3:]:
                rec[c] = None if row[c] == "" else float(row[c])
            out.append(rec)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
