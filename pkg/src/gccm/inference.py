"""One-step prediction, iterative reverse diffusion, and sample aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .denoiser import GraphBatch, ModelConfig, denoise
from .diffusion import DISCRETE, LabelDiffusion, reverse_mean, reverse_variance, sample_categorical
from .graphs import is_classification, is_node_task

X0 = "x0"
EPS = "eps"


@dataclass
class PredictionResult:
    y_hat: np.ndarray
    per_sample: list[np.ndarray] | None = None
    n_samples: int = 1
    n_steps: int = 1
    n_forward: int = 0
    trajectory: list[np.ndarray] | None = field(default=None, repr=False)


class _CountingDenoiser:
    """Wraps the network so every forward pass is counted."""

    def __init__(self, params, config: ModelConfig, batch: GraphBatch):
        self.params, self.config, self.batch = params, config, batch
        self.calls = 0

    def __call__(self, y_t: np.ndarray, t: int) -> np.ndarray:
        self.calls += 1
        return denoise(self.params, self.config, self.batch, y_t, t).y_hat.data


def _rows(config: ModelConfig, batch: GraphBatch) -> int:
    return batch.n_nodes if is_node_task(config.task) else batch.n_graphs


def one_step_predict(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    batch: GraphBatch,
    process: LabelDiffusion,
    rng: np.random.Generator,
    parameterization: str = X0,
) -> PredictionResult:
    """Draw Y_T from the prior and read the prediction off one pass at t = T.

    With ``parameterization='eps'`` the output is taken as predicted noise
    and converted to a clean estimate.
    """
    net = _CountingDenoiser(params, config, batch)
    y_T = process.prior(_rows(config, batch), rng)
    out = net(y_T, config.T)
    if parameterization == EPS:
        ab = process.schedule.alpha_bar(config.T)
        out = (y_T - np.sqrt(1.0 - ab) * out) / np.sqrt(ab)
    elif parameterization != X0:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    return PredictionResult(out, None, 1, 1, net.calls)


def strided_steps(T: int, n_steps: int) -> list[int]:
    """``n_steps + 1`` evenly spaced, strictly decreasing steps from T to 0."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in [1, {T}], got {n_steps}")
    return [int(round(T - k * T / n_steps)) for k in range(n_steps + 1)]


def iterative_denoise(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    batch: GraphBatch,
    process: LabelDiffusion,
    n_steps: int,
    rng: np.random.Generator,
    parameterization: str | None = None,
) -> PredictionResult:
    """Ancestral sampling over an evenly strided sub-schedule.

    Discrete labels: each step samples from the posterior marginalised
    over the predicted clean label, and the final step returns that
    predicted distribution.  Gaussian labels: the network output is read
    as noise, and the last step returns the reverse mean without noise.
    The trajectory records the clean-label estimate at each step.
    """
    if parameterization is None:
        parameterization = X0 if process.kind == DISCRETE else EPS
    steps = strided_steps(config.T, n_steps)
    net = _CountingDenoiser(params, config, batch)
    y = process.prior(_rows(config, batch), rng)
    trajectory = []
    for t, s in zip(steps[:-1], steps[1:]):
        out = net(y, t)
        if process.kind == DISCRETE:
            trajectory.append(out)
            if s == 0:
                y = out
            else:
                y = sample_categorical(process.chain.posterior(y, out, t, s), rng)
            continue
        ab = process.schedule.alpha_bar(t)
        if parameterization == EPS:
            eps_hat = out
            trajectory.append((y - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab))
        else:
            trajectory.append(out)
            eps_hat = (y - np.sqrt(ab) * out) / np.sqrt(1.0 - ab)
        mean = reverse_mean(y, eps_hat, t, process.schedule, s)
        if s == 0:
            y = mean
        else:
            y = mean + np.sqrt(reverse_variance(t, process.schedule, s)) * rng.standard_normal(y.shape)
    return PredictionResult(y, None, 1, n_steps, net.calls, trajectory)


def aggregate_predictions(samples: Sequence[np.ndarray], task: str) -> np.ndarray:
    """Mean of the samples; classification means are rendered one-hot at the argmax."""
    if len(samples) == 0:
        raise ValueError("cannot aggregate an empty list of predictions")
    shape = np.shape(samples[0])
    if any(np.shape(s) != shape for s in samples):
        raise ValueError("predictions to aggregate have different shapes")
    mean = np.mean(np.stack([np.asarray(s, dtype=np.float64) for s in samples]), axis=0)
    if not is_classification(task):
        return mean
    return np.eye(mean.shape[1])[mean.argmax(axis=1)]


def predict(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    batch: GraphBatch,
    process: LabelDiffusion,
    seed: int,
    n_samples: int = 1,
    n_steps: int | None = None,
    parameterization: str | None = None,
    keep_samples: bool = False,
) -> PredictionResult:
    """Aggregate ``n_samples`` independent predictions.

    ``n_steps=None`` means one-step prediction.  Sample ``k`` draws its
    noise from the stream ``(seed, k)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    samples, calls = [], 0
    for k in range(n_samples):
        rng = np.random.default_rng([seed, k])
        if n_steps is None:
            res = one_step_predict(params, config, batch, process, rng, parameterization or X0)
        else:
            res = iterative_denoise(params, config, batch, process, n_steps, rng, parameterization)
        samples.append(res.y_hat)
        calls += res.n_forward
    y_hat = aggregate_predictions(samples, config.task)
    return PredictionResult(y_hat, samples if keep_samples else None, n_samples, 1 if n_steps is None else n_steps, calls)


def prediction_records(y_hat: np.ndarray, batch: GraphBatch, task: str, n_samples: int, n_steps: int) -> list[dict]:
    """One JSON-ready record per instance (node rows are grouped by graph)."""
    if is_node_task(task):
        chunks = [y_hat[sl] for sl in batch.graph_slices()]
    else:
        chunks = [y_hat[i : i + 1] for i in range(batch.n_graphs)]
    recs = []
    for c in chunks:
        argmax = c.argmax(axis=1).tolist() if is_classification(task) else None
        if argmax is not None and len(argmax) == 1:
            argmax = argmax[0]
        recs.append({"pred": c.ravel().tolist(), "argmax": argmax, "n_samples": n_samples, "n_steps": n_steps})
    return recs


def write_predictions(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(list(records), fh, indent=1)
        fh.write("\n")
