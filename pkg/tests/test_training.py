import math

import numpy as np
import pytest

from gccm.graphs import GRAPH_REGRESSION, generate_sbm_cluster, generate_triangle_regression
from gccm.objectives import LossBreakdown
from gccm.training import (
    AdamMoments,
    TrainConfig,
    TrainState,
    TrainingDiverged,
    adam_update,
    diffusion_loss,
    draw_views,
    label_process,
    read_metrics_csv,
    sample_timestep_pair,
    t2_for,
    train,
    train_step_diffusion,
    train_step_gccm,
    train_step_pcl,
    write_metrics_csv,
)

from gccm.autodiff import Tensor


def small_sbm(seed=0, degenerate=False, graphs=12):
    if degenerate:
        return generate_sbm_cluster(graphs, 12, 3, 1.0, 0.0, 1.0, np.random.default_rng(seed), (0.5, 0.25, 0.25))
    return generate_sbm_cluster(graphs, 12, 3, 0.6, 0.1, 0.5, np.random.default_rng(seed), (0.5, 0.25, 0.25))


def fresh(ds, cfg):
    return TrainState.fresh(cfg.model_config(ds.task, ds.d_x, ds.d_k), cfg)


def items_of(ds, n=4):
    return [(i, inst) for i, inst in enumerate(ds.instances) if inst.split == "train"][:n]


CFG = dict(T=100, d_h=8, d_z=8, n_layers=2, seed=3)


# -- timestep pairs -------------------------------------------------------


def test_t2_examples():
    assert t2_for(1000, 0.2) == 200
    assert t2_for(3, 0.2) == 1
    assert t2_for(1, 0.5) == 1


def test_timestep_pair_ordering():
    rng = np.random.default_rng(0)
    for _ in range(500):
        t1, t2 = sample_timestep_pair(50, 0.3, rng)
        assert 1 <= t2 <= t1 <= 50 and t2 == max(1, math.floor(0.3 * t1))


def test_t1_is_uniform_chi_square():
    rng = np.random.default_rng(1)
    draws = np.array([sample_timestep_pair(100, 0.2, rng)[0] for _ in range(100_000)])
    counts = np.bincount(draws, minlength=101)[1:]
    chi2 = ((counts - 1000.0) ** 2 / 1000.0).sum()
    # 99.9th percentile of chi-square with 99 degrees of freedom is about 148.2
    assert chi2 < 148.2 and counts.min() > 0


# -- adam -----------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([[1.0, -2.0]])}
    new, _ = adam_update(p, {"w": np.zeros((1, 2))}, AdamMoments.zeros_like(p), 1e-3, 1)
    assert np.array_equal(new["w"], p["w"])


def test_adam_first_step_magnitude_is_lr():
    p = {"w": np.array([[0.0]])}
    new, m = adam_update(p, {"w": np.array([[0.37]])}, AdamMoments.zeros_like(p), 1e-2, 1)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert new["w"][0, 0] == pytest.approx(-1e-2 * 0.37 / (0.37 + 1e-8), rel=1e-12)
    assert m.m["w"][0, 0] == pytest.approx(0.1 * 0.37)


def test_adam_constant_gradient_descends():
    p = {"w": np.array([[0.5]])}
    mom = AdamMoments.zeros_like(p)
    for step in range(1, 50):
        p, mom = adam_update(p, {"w": np.array([[2.0]])}, mom, 1e-2, step)
    assert p["w"][0, 0] < 0.5 - 0.4


def test_adam_rejects_nan_gradient():
    p = {"w": np.zeros((1, 1))}
    with pytest.raises(FloatingPointError):
        adam_update(p, {"w": np.array([[np.nan]])}, AdamMoments.zeros_like(p), 1e-3, 1)


# -- steps ----------------------------------------------------------------


def test_zero_weights_step_changes_nothing():
    ds = small_sbm()
    cfg = TrainConfig(variant="gccm", lambda1=0.0, lambda2=0.0, **CFG)
    state = fresh(ds, cfg)
    before = {k: v.copy() for k, v in state.params.items()}
    train_step_gccm(items_of(ds), state, cfg)
    assert all(np.array_equal(before[k], state.params[k]) for k in before)


@pytest.mark.parametrize("variant,step_fn", [("gccm", train_step_gccm), ("pcl", train_step_pcl), ("diffusion", train_step_diffusion)])
def test_single_step_is_bitwise_reproducible(variant, step_fn):
    ds = small_sbm()
    cfg = TrainConfig(variant=variant, **CFG)
    runs = []
    for _ in range(2):
        state = fresh(ds, cfg)
        bd = step_fn(items_of(ds), state, cfg)
        runs.append((bd, state.params))
    (a, pa), (b, pb) = runs
    assert (a.boundary_t1, a.boundary_t2, a.consistency, a.total) == (b.boundary_t1, b.boundary_t2, b.consistency, b.total)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_step_function_checks_variant():
    ds = small_sbm()
    cfg = TrainConfig(variant="pcl", **CFG)
    with pytest.raises(ValueError):
        train_step_gccm(items_of(ds), fresh(ds, cfg), cfg)


def test_label_pathway_gradient_is_nonzero():
    ds = small_sbm()
    cfg = TrainConfig(variant="gccm", **CFG)
    state = fresh(ds, cfg)
    before = state.params["W_y"].copy()
    train_step_gccm(items_of(ds), state, cfg)
    assert not np.array_equal(before, state.params["W_y"])


def test_shortcut_params_pcl_consistency_exactly_zero():
    ds = small_sbm()
    cfg = TrainConfig(variant="pcl", **CFG)
    state = fresh(ds, cfg)
    state.params["W_y"][:] = 0
    state.params["W_t"][:] = 0
    bd = train_step_pcl(items_of(ds), state, cfg)
    assert bd.consistency == 0.0


def _trajectory(ds, cfg, steps=3):
    state = fresh(ds, cfg)
    out = []
    train_items = items_of(ds, 6)
    for s in range(steps):
        bd = (train_step_gccm if cfg.variant == "gccm" else train_step_pcl)(train_items[s * 2 : s * 2 + 2], state, cfg)
        out.append((bd, {k: v.copy() for k, v in state.params.items()}))
    return out


def test_variant_nesting_without_consistency_or_perturbation():
    ds = small_sbm()
    base = dict(CFG, lambda2=0.0)
    g = _trajectory(ds, TrainConfig(variant="gccm", perturb_kind="none", **base))
    p = _trajectory(ds, TrainConfig(variant="pcl", **base))
    s = _trajectory(ds, TrainConfig(variant="supervised", **base))
    for (bg, pg), (bp, pp), (bs, ps) in zip(g, p, s):
        assert abs(bg.boundary_t1 - bp.boundary_t1) <= 1e-12 and abs(bg.boundary_t2 - bs.boundary_t2) <= 1e-12
        for k in pg:
            if k.startswith("proj_c"):
                continue
            assert np.max(np.abs(pg[k] - pp[k])) <= 1e-12
            assert np.max(np.abs(pp[k] - ps[k])) <= 1e-12


def test_only_parameters_with_gradient_move():
    ds = small_sbm()
    cfg = TrainConfig(variant="pcl", **CFG)
    state = fresh(ds, cfg)
    before = {k: v.copy() for k, v in state.params.items()}
    train_step_pcl(items_of(ds), state, cfg)
    # the contrastive head is not part of the pcl objective
    for k in before:
        moved = not np.array_equal(before[k], state.params[k])
        assert moved == (not k.startswith("proj_c")), k


def test_diffusion_losses_vanish_for_perfect_outputs():
    ds = small_sbm()
    cfg = TrainConfig(variant="diffusion", **CFG)
    process = label_process(cfg, ds.task, ds.d_k)
    views = draw_views(items_of(ds), cfg, process, 0, 0)
    assert diffusion_loss(Tensor(views.y0), None, views, ds.task).total == 0.0
    reg = generate_triangle_regression(4, (5, 7), 0.4, np.random.default_rng(0))
    rcfg = TrainConfig(variant="diffusion", **CFG)
    rviews = draw_views(list(enumerate(reg.instances)), rcfg, label_process(rcfg, GRAPH_REGRESSION, 1), 0, 0)
    assert diffusion_loss(Tensor(rviews.eps1), None, rviews, GRAPH_REGRESSION).total == 0.0


def test_diffusion_loss_decreases_on_degenerate_data():
    ds = small_sbm(degenerate=True, graphs=16)
    cfg = TrainConfig(variant="diffusion", learning_rate=1e-2, **CFG)
    state = fresh(ds, cfg)
    items = items_of(ds, 8)
    losses = [train_step_diffusion(items, state, cfg).total for _ in range(200)]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


def test_views_keep_t2_rule_and_independent_noise():
    ds = small_sbm()
    cfg = TrainConfig(variant="gccm", **CFG)
    views = draw_views(items_of(ds), cfg, label_process(cfg, ds.task, ds.d_k), 0, 0)
    assert np.array_equal(views.t2, np.maximum(1, np.floor(cfg.alpha * views.t1)).astype(int))
    assert not np.array_equal(views.x1, views.x2)
    pcl = TrainConfig(variant="pcl", **CFG)
    pv = draw_views(items_of(ds), pcl, label_process(pcl, ds.task, ds.d_k), 0, 0)
    assert np.array_equal(pv.x1, pv.x2)


def test_contrastive_subsample_bounds_node_count():
    ds = small_sbm()
    cfg = TrainConfig(variant="gccm", contrastive_nodes=10, **CFG)
    views = draw_views(items_of(ds), cfg, label_process(cfg, ds.task, ds.d_k), 0, 0)
    assert views.index.size == 10 and len(set(views.index.tolist())) == 10


# -- loop -----------------------------------------------------------------


def test_zero_epochs_returns_initial_params():
    ds = small_sbm()
    cfg = TrainConfig(variant="gccm", epochs=0, **CFG)
    state = train(ds, cfg)
    init = fresh(ds, cfg).params
    assert state.history == [] and all(np.array_equal(init[k], state.params[k]) for k in init)


def test_training_is_deterministic_and_rows_satisfy_identity(tmp_path):
    ds = small_sbm()
    cfg = TrainConfig(variant="gccm", epochs=2, batch_size=3, **CFG)
    a, b = train(ds, cfg), train(ds, cfg)
    assert a.history == b.history and a.best_metric == b.best_metric
    for row in a.history:
        bd = LossBreakdown(row["boundary_t1"], row["boundary_t2"], row["consistency"], row["total"], row["lambda1"], row["lambda2"])
        assert bd.identity_gap() <= 1e-12
    assert sum(r["val_metric"] is not None for r in a.history) == 2
    write_metrics_csv(a.history, tmp_path / "m.csv")
    back = read_metrics_csv(tmp_path / "m.csv")
    assert [r["total"] for r in back] == [r["total"] for r in a.history]


def test_best_snapshot_tracks_best_validation_epoch():
    ds = small_sbm()
    seen = []
    state = train(ds, TrainConfig(variant="pcl", epochs=3, **CFG), on_epoch=lambda s, m: seen.append(m))
    assert state.best_metric == max(seen) and seen[state.best_epoch] == state.best_metric


def test_non_finite_loss_aborts(monkeypatch):
    import gccm.training as tr

    ds = small_sbm()
    cfg = TrainConfig(variant="pcl", epochs=1, **CFG)
    real = tr.variant_loss

    def broken(*args, **kwargs):
        bd = real(*args, **kwargs)
        bd.total = float("nan")
        return bd

    monkeypatch.setattr(tr, "variant_loss", broken)
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(ds, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.0)
    with pytest.raises(ValueError):
        TrainConfig(variant="nope")
    with pytest.raises(ValueError):
        TrainConfig(tau=0.0)


def test_discrete_perturbation_needs_one_hot_features():
    ds = small_sbm()
    with pytest.raises(ValueError, match="one-hot"):
        train(ds, TrainConfig(variant="gccm", perturb_kind="discrete", epochs=1, **CFG))


def test_regression_diffusion_validation_uses_mae():
    ds = generate_triangle_regression(12, (5, 8), 0.4, np.random.default_rng(1), (0.5, 0.25, 0.25))
    state = train(ds, TrainConfig(variant="diffusion", epochs=1, val_steps=5, **CFG))
    assert state.best_metric is not None and state.best_metric >= 0
