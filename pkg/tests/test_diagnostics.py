import numpy as np
import pytest

from gccm.denoiser import GraphBatch, ModelConfig, init_params, make_shortcut
from gccm.diffusion import CONTINUOUS, DISCRETE, linear_continuous_schedule, linear_discrete_schedule
from gccm.diagnostics import (
    DiagnosticsReport,
    GradcheckFixture,
    contribution_heatmap,
    gradcheck,
    probe_heatmap,
    relative_error,
    run_gradcheck,
    verify_lemma1,
    verify_lemma2,
    verify_lemma3,
    write_heatmap_csv,
)
from gccm.graphs import Graph, NODE_CLASSIFICATION, generate_sbm_cluster


def fixture(seed=0):
    ds = generate_sbm_cluster(3, 10, 3, 0.6, 0.1, 0.5, np.random.default_rng(seed))
    mc = ModelConfig(ds.task, ds.d_x, ds.d_k, d_h=8, d_z=8, n_layers=2, T=50)
    return ds, mc, init_params(mc, np.random.default_rng(seed + 1))


def test_heatmap_examples():
    z = np.zeros((2, 3))
    assert np.array_equal(contribution_heatmap((z, z, np.ones((2, 3)))), z)
    assert np.array_equal(contribution_heatmap((np.ones((2, 3)), z, z)), np.ones((2, 3)))
    half = contribution_heatmap((np.ones((1, 2)), z[:1, :2], -np.ones((1, 2))))
    assert np.array_equal(half, np.full((1, 2), 0.5))
    assert np.array_equal(contribution_heatmap((z, z, z)), z)


def test_heatmap_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        contribution_heatmap((np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2))))


def test_heatmap_grows_with_label_weight_scale():
    ds, mc, p = fixture()
    batch = GraphBatch.from_graphs([i.graph for i in ds.instances])
    means = []
    for scale in (0.5, 1.0, 2.0, 4.0):
        q = dict(p, W_y=p["W_y"] * scale)
        heat, _ = probe_heatmap(q, mc, batch, ds.instances, seed=3, t=10)
        assert heat.min() >= 0 and heat.max() <= 1
        means.append(heat.mean())
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_shortcut_heatmap_is_all_zero(tmp_path):
    ds, mc, p = fixture()
    batch = GraphBatch.from_graphs([i.graph for i in ds.instances])
    heat, probe = probe_heatmap(make_shortcut(p), mc, batch, ds.instances, seed=0)
    assert probe.t == 25 and heat.shape == (batch.n_nodes, mc.d_h) and not heat.any()
    write_heatmap_csv(heat, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert len(lines) == 1 + mc.d_h and lines[0].split(",")[1] == "node0"


def test_lemma1_passes_and_control_is_nonzero():
    ds, mc, p = fixture()
    r = verify_lemma1(p, mc, ds.instances, 1.0, 0.1, n_draws=20, seed=0)
    assert r["pass"] and r["ds_value"] == 0.0 and r["boundary_equiv_gap"] <= 1e-12
    assert r["control_nonzero"] and r["control_ds_value"] > 0


@pytest.mark.parametrize("n", [2, 4, 8])
def test_lemma2_collapse_value(n):
    r = verify_lemma2(n, 8, 0.5)
    assert r["pass"] and r["gap"] <= 1e-9 and r["dc_distinct"] < r["logN_reference"]


def test_lemma2_single_instance_is_ungraded():
    r = verify_lemma2(1)
    assert not r["graded"] and r["dc_value"] == 0.0 and r["logN_reference"] == 0.0


def test_lemma2_low_dimension_still_separates():
    r = verify_lemma2(16, 4, 0.5, seed=1)
    assert r["pass"]


def test_lemma3_separates_views_with_zero_control():
    ds, mc, p = fixture()
    for k in range(3):
        r = verify_lemma3(p, mc, ds.instances[k].graph, 10, linear_continuous_schedule(mc.T), np.random.default_rng(k))
        assert r["pass"] and r["control_gap"] == 0.0 and r["z_gap_norm"] > 0 and not r["degenerate_network"]


def test_lemma3_discrete_perturbation_on_one_hot_features():
    rng = np.random.default_rng(0)
    g = Graph(np.eye(3)[rng.integers(0, 3, 10)], np.ones((10, 10)) - np.eye(10))
    mc = ModelConfig(NODE_CLASSIFICATION, 3, 2, d_h=8, d_z=8, n_layers=2, T=50)
    r = verify_lemma3(init_params(mc, rng), mc, g, 20, linear_discrete_schedule(50), rng, DISCRETE)
    assert r["control_gap"] == 0.0 and r["z_gap_norm"] > 0


def test_lemma3_flags_all_zero_network():
    ds, mc, p = fixture()
    zero = {k: np.zeros_like(v) for k, v in p.items()}
    r = verify_lemma3(zero, mc, ds.instances[0].graph, 10, linear_continuous_schedule(mc.T), np.random.default_rng(0), CONTINUOUS)
    assert r["degenerate_network"] and not r["pass"] and r["z_gap_norm"] == 0.0


def test_relative_error_floor():
    assert relative_error(np.array([1e-10]), np.array([0.0])) == pytest.approx(1e-10)
    assert relative_error(np.array([2.0]), np.array([1.0])) == 0.5


def test_gradcheck_on_quadratic_and_corruption():
    def loss(p):
        return (p["w"] * p["w"]).sum()

    params = {"w": np.array([[0.5, -1.5]])}
    assert gradcheck(loss, params)["w"] < 1e-8
    assert gradcheck(loss, params, corrupt=True)["w"] > 1e-2


def test_run_gradcheck_passes_and_detects_corruption():
    fx = GradcheckFixture(d_h=4, n_layers=1, n_graphs=2, nodes=4, T=10)
    clean = run_gradcheck(fx, variants=("pcl", "gccm"))
    assert clean["pass"] and clean["max_rel_error"] < 1e-4
    bad = run_gradcheck(fx, variants=("gccm",), corrupt=True)
    assert not bad["pass"]


def test_report_pass_flag_and_serialization(tmp_path):
    good = DiagnosticsReport(np.zeros((2, 3)), {"pass": True}, [{"pass": True}], [], None, {"probe_t": 5})
    assert good.passed
    good.write(tmp_path / "r.json")
    d = good.to_dict()
    assert d["meta"]["contribution_mean"] == 0.0 and d["pass"]
    assert not DiagnosticsReport(lemma2=[{"pass": True}, {"pass": False}]).passed
