"""Shortcut-solution checks, the fusion contribution heatmap, and gradient checking."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor
from .denoiser import (
    FusionTerms,
    GraphBatch,
    ModelConfig,
    Params,
    as_tensors,
    denoise,
    deterministic_predict,
    init_params,
    make_shortcut,
)
from .diffusion import CONTINUOUS, LabelDiffusion, NoiseSchedule, perturb_features
from .graphs import Graph, LabeledInstance, NODE_CLASSIFICATION, is_classification
from .objectives import boundary_loss, contrastive_loss, pcl_objective
from .training import TrainConfig, draw_views, label_process, variant_loss

EXACT_TOL = 1e-12
CLOSED_FORM_TOL = 1e-9
GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-5


# -- contribution heatmap ------------------------------------------------


def contribution_heatmap(terms: FusionTerms | tuple) -> np.ndarray:
    """Share of each fused entry coming from the label and timestep pathways.

    Entries whose total magnitude is below 1e-15 are set to 0.
    """
    if isinstance(terms, FusionTerms):
        label, time, feature = terms.label, terms.time, terms.feature
    else:
        label, time, feature = terms
    a, b, c = (np.abs(v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)) for v in (label, time, feature))
    if not a.shape == b.shape == c.shape:
        raise ValueError(f"contribution_heatmap: addend shapes differ: {a.shape}, {b.shape}, {c.shape}")
    num = a + b
    den = num + c
    out = np.zeros_like(den)
    ok = den >= 1e-15
    out[ok] = num[ok] / den[ok]
    return out


@dataclass
class HeatmapProbe:
    t: int
    seed: int


def probe_heatmap(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    batch: GraphBatch,
    instances: list[LabeledInstance],
    seed: int,
    t: int | None = None,
) -> tuple[np.ndarray, HeatmapProbe]:
    """Heatmap for one noisy draw of the true labels at ``t`` (default T / 2)."""
    t = max(1, config.T // 2) if t is None else t
    process = LabelDiffusion.for_task(is_classification(config.task), config.T, config.d_k)
    rng = np.random.default_rng([seed, t])
    y_t = np.concatenate([process.sample(inst.y, t, rng).y_t for inst in instances], axis=0)
    out = denoise(params, config, batch, y_t, t)
    return contribution_heatmap(out.fusion), HeatmapProbe(t, seed)


def write_heatmap_csv(heat: np.ndarray, path: str | Path) -> None:
    """Hidden dimensions as rows and nodes as columns."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dim"] + [f"node{i}" for i in range(heat.shape[0])])
        for d in range(heat.shape[1]):
            w.writerow([d] + [repr(float(v)) for v in heat[:, d]])


# -- lemma checks --------------------------------------------------------


def _noisy_labels(process: LabelDiffusion, instances, t: int, rng) -> np.ndarray:
    return np.concatenate([process.sample(inst.y, t, rng).y_t for inst in instances], axis=0)


def verify_lemma1(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    instances: list[LabeledInstance],
    lambda1: float = 1.0,
    lambda2: float = 0.1,
    n_draws: int = 100,
    seed: int = 0,
) -> dict:
    """Zero the label and timestep projections, then compare against the feature-only map.

    Checks over ``n_draws`` random (t1, t2, noise) draws that the
    self-consistency term is exactly zero and that the two-view objective
    equals twice the weighted supervised loss of the deterministic map.
    A second pass with the original parameters reports whether the
    consistency term is positive there (the negative control).
    """
    sc = make_shortcut(params)
    batch = GraphBatch.from_graphs([inst.graph for inst in instances])
    y = np.concatenate([inst.y for inst in instances], axis=0)
    process = LabelDiffusion.for_task(is_classification(config.task), config.T, config.d_k)
    det = deterministic_predict(sc, config, batch)
    supervised = boundary_loss(det.y_hat, y, config.task, det.log_probs).item()
    rng = np.random.default_rng([seed, 1])
    worst_ds, worst_gap = 0.0, 0.0
    for _ in range(n_draws):
        t1, t2 = (int(v) for v in rng.integers(1, config.T + 1, size=2))
        o1 = denoise(sc, config, batch, _noisy_labels(process, instances, t1, rng), t1)
        o2 = denoise(sc, config, batch, _noisy_labels(process, instances, t2, rng), t2)
        bd = pcl_objective(o1, o2, y, lambda1, lambda2, config.task)
        worst_ds = max(worst_ds, abs(bd.consistency))
        worst_gap = max(worst_gap, abs(bd.total - 2 * lambda1 * supervised))
    t1, t2 = (int(v) for v in rng.integers(1, config.T + 1, size=2))
    c1 = denoise(params, config, batch, _noisy_labels(process, instances, t1, rng), t1)
    c2 = denoise(params, config, batch, _noisy_labels(process, instances, t2, rng), t2)
    control = pcl_objective(c1, c2, y, lambda1, lambda2, config.task).consistency
    return {
        "ds_value": worst_ds,
        "boundary_equiv_gap": worst_gap,
        "supervised_loss": supervised,
        "n_draws": n_draws,
        "control_ds_value": control,
        "control_nonzero": bool(control > 0),
        "pass": bool(worst_ds == 0.0 and worst_gap <= EXACT_TOL),
    }


def collapsed_latents(n: int, d_z: int) -> tuple[np.ndarray, np.ndarray]:
    z = np.ones((n, d_z))
    return z, z.copy()


def distinct_latents(n: int, d_z: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Each instance gets its own direction, shared by both views."""
    if d_z >= n:
        z = np.eye(n, d_z)
    else:
        z = rng.standard_normal((n, d_z))
    return z, z.copy()


def verify_lemma2(n: int, d_z: int = 16, tau: float = 0.5, seed: int = 0) -> dict:
    """Full collapse gives exactly log N; distinct latents do strictly better."""
    if n < 1:
        raise ValueError("need at least one instance")
    z1, z2 = collapsed_latents(n, d_z)
    dc = contrastive_loss(Tensor(z1), Tensor(z2), tau).item()
    ref = float(np.log(n))
    d1, d2 = distinct_latents(n, d_z, np.random.default_rng(seed))
    dc_distinct = contrastive_loss(Tensor(d1), Tensor(d2), tau).item()
    graded = n >= 2
    gap = abs(dc - ref)
    return {
        "n": n,
        "tau": tau,
        "dc_value": dc,
        "logN_reference": ref,
        "gap": gap,
        "dc_distinct": dc_distinct,
        "graded": graded,
        "pass": bool(gap <= CLOSED_FORM_TOL and dc_distinct < ref) if graded else True,
    }


def verify_lemma3(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    graph: Graph,
    T_per: int,
    schedule_per: NoiseSchedule,
    rng: np.random.Generator,
    kind: str = CONTINUOUS,
    t1: int | None = None,
    t2: int | None = None,
) -> dict:
    """Independent feature perturbations separate the two latents under shortcut params."""
    sc = make_shortcut(params)
    batch = GraphBatch.from_graphs([graph])
    rows = graph.n if config.task == NODE_CLASSIFICATION else 1
    process = LabelDiffusion.for_task(is_classification(config.task), config.T, config.d_k)
    t1 = int(rng.integers(1, config.T + 1)) if t1 is None else t1
    t2 = int(rng.integers(1, config.T + 1)) if t2 is None else t2
    y1, y2 = process.prior(rows, rng), process.prior(rows, rng)

    def gap(x1, x2) -> float:
        z1 = denoise(sc, config, batch.with_features(x1), y1, t1).z.data
        z2 = denoise(sc, config, batch.with_features(x2), y2, t2).z.data
        return float(np.linalg.norm(z1 - z2))

    control = gap(graph.x, graph.x)
    x1 = perturb_features(graph.x, kind, T_per, schedule_per, rng)
    x2 = perturb_features(graph.x, kind, T_per, schedule_per, rng)
    if np.array_equal(x1, x2):
        x2 = perturb_features(graph.x, kind, T_per, schedule_per, rng)
        if np.array_equal(x1, x2):
            raise RuntimeError("feature perturbation produced identical views twice")
    z_gap = gap(x1, x2)
    degenerate = all(not np.any(sc[f"enc{l}_W"]) for l in range(config.n_layers)) and not np.any(sc["W_x"])
    return {
        "z_gap_norm": z_gap,
        "control_gap": control,
        "t1": t1,
        "t2": t2,
        "degenerate_network": bool(degenerate),
        "pass": bool(z_gap > CLOSED_FORM_TOL and control == 0.0),
    }


# -- gradient check ------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a - n| / max(|a|, |n|), absolute where both are below ``floor``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    rel = np.where(scale < floor, diff, diff / np.where(scale < floor, 1.0, scale))
    return float(rel.max()) if rel.size else 0.0


def gradcheck(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = GRADCHECK_STEP,
    corrupt: bool = False,
) -> dict[str, float]:
    """Central finite differences against backward, per parameter block."""
    leaves = as_tensors(params, requires_grad=True)
    root = loss_fn(leaves)
    root.backward()
    report = {}
    for name, base in params.items():
        analytic = leaves[name].grad if leaves[name].grad is not None else np.zeros_like(base)
        if corrupt:
            analytic = analytic * 1.5 + 1e-3
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                bumped = dict(params)
                arr = base.copy()
                arr[idx] += sign * step
                bumped[name] = arr
                vals.append(loss_fn(as_tensors(bumped)).item())
            numeric[idx] = (vals[0] - vals[1]) / (2 * step)
        report[name] = relative_error(analytic, numeric)
    return report


@dataclass
class GradcheckFixture:
    d_h: int = 8
    n_layers: int = 2
    n_graphs: int = 4
    nodes: int = 5
    K: int = 3
    T: int = 20
    seed: int = 0


def _fixture_instances(fx: GradcheckFixture, task: str) -> list[LabeledInstance]:
    rng = np.random.default_rng([fx.seed, 7])
    out = []
    for _ in range(fx.n_graphs):
        a = (rng.random((fx.nodes, fx.nodes)) < 0.5).astype(float)
        a = np.triu(a, 1)
        a = a + a.T
        if task == NODE_CLASSIFICATION:
            x = rng.standard_normal((fx.nodes, 3))
            y = np.eye(fx.K)[rng.integers(0, fx.K, size=fx.nodes)]
        elif is_classification(task):
            x = rng.standard_normal((fx.nodes, 3))
            y = np.eye(fx.K)[rng.integers(0, fx.K, size=1)]
        else:
            x = rng.standard_normal((fx.nodes, 3))
            # keep regression residuals away from the |.| kink
            y = np.array([[5.0 + rng.random()]])
        out.append(LabeledInstance(Graph(x, a), task, y))
    return out


def run_gradcheck(
    fixture: GradcheckFixture | None = None,
    variants: tuple[str, ...] = ("diffusion", "pcl", "pcl-contrastive", "gccm"),
    tasks: tuple[str, ...] = (NODE_CLASSIFICATION,),
    corrupt: bool = False,
    lambda2_values: tuple[float, ...] = (0.1,),
) -> dict:
    """Gradient check of every variant's full loss on a small random model."""
    fx = fixture or GradcheckFixture()
    results = {}
    worst = 0.0
    for task in tasks:
        instances = _fixture_instances(fx, task)
        d_k = instances[0].y.shape[1]
        for variant in variants:
            for lam2 in lambda2_values:
                cfg = TrainConfig(
                    variant=variant, T=fx.T, T_per=3, d_h=fx.d_h, d_z=fx.d_h, n_layers=fx.n_layers,
                    lambda2=lam2, perturb_kind=CONTINUOUS, seed=fx.seed, contrastive_nodes=12,
                )
                mc = cfg.model_config(task, instances[0].graph.d_x, d_k)
                params = init_params(mc, np.random.default_rng([fx.seed, 3]))
                views = draw_views(list(enumerate(instances)), cfg, label_process(cfg, task, d_k), 0, 0)
                per_block = gradcheck(lambda p: variant_loss(p, mc, cfg, views).loss, params, corrupt=corrupt)
                key = f"{task}/{variant}/lambda2={lam2}"
                err = max(per_block.values())
                worst = max(worst, err)
                results[key] = {"max_rel_error": err, "per_block": per_block, "pass": bool(err < GRADCHECK_TOL)}
    return {"checks": results, "max_rel_error": worst, "threshold": GRADCHECK_TOL, "corrupted": corrupt, "pass": all(r["pass"] for r in results.values())}


# -- report --------------------------------------------------------------


@dataclass
class DiagnosticsReport:
    contribution: np.ndarray | None = None
    lemma1: dict | None = None
    lemma2: list[dict] | None = None
    lemma3: list[dict] | None = None
    gradcheck: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        flags = []
        if self.lemma1 is not None:
            flags.append(self.lemma1["pass"])
        flags += [r["pass"] for r in self.lemma2 or []]
        flags += [r["pass"] for r in self.lemma3 or []]
        if self.gradcheck is not None:
            flags.append(self.gradcheck["pass"])
        return all(flags)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.contribution is not None:
            d["contribution"] = self.contribution.tolist()
            d["meta"] = {**self.meta, "contribution_mean": float(self.contribution.mean())}
        d["pass"] = self.passed
        return d

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def shortcut_params(config: ModelConfig, seed: int) -> Params:
    return init_params(config, np.random.default_rng(seed), shortcut=True)
