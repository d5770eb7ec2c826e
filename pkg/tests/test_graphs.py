import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gccm.graphs import (
    GRAPH_CLASSIFICATION,
    NODE_CLASSIFICATION,
    Dataset,
    DatasetFormatError,
    Graph,
    LabeledInstance,
    assign_splits,
    count_triangles,
    datasets_equal,
    generate_planted_pattern,
    generate_sbm_cluster,
    generate_triangle_regression,
    load_dataset,
    save_dataset,
    triangle_instance,
)

from helpers import random_adjacency


def brute_force_triangles(adj):
    n = adj.shape[0]
    return sum(1 for i, j, k in itertools.combinations(range(n), 3) if adj[i, j] and adj[j, k] and adj[i, k])


def test_graph_rejects_asymmetric_adjacency():
    with pytest.raises(ValueError):
        Graph(np.ones((2, 1)), np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_graph_rejects_self_loops():
    with pytest.raises(ValueError):
        Graph(np.ones((1, 1)), np.array([[1.0]]))


def test_instance_rejects_bad_one_hot():
    g = Graph(np.ones((1, 1)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        LabeledInstance(g, NODE_CLASSIFICATION, np.array([[0.5, 0.5]]))


def test_degenerate_sbm_is_disjoint_cliques_with_revealing_features():
    ds = generate_sbm_cluster(3, 12, 3, 1.0, 0.0, 1.0, np.random.default_rng(0))
    for inst in ds.instances:
        blocks = inst.y.argmax(axis=1)
        same = blocks[:, None] == blocks[None, :]
        expect = same & ~np.eye(12, dtype=bool)
        assert np.array_equal(inst.graph.adj.astype(bool), expect)
        assert np.array_equal(inst.graph.x[:, :3], inst.y)
        assert np.all(inst.graph.x[:, 3] == 1)


@pytest.mark.parametrize("p_in,p_out", [(0.3, 0.3), (0.1, 0.5)])
def test_sbm_rejects_uninformative_probabilities(p_in, p_out):
    with pytest.raises(ValueError):
        generate_sbm_cluster(2, 8, 2, p_in, p_out, 0.5, np.random.default_rng(0))


def test_sbm_intra_block_density():
    ds = generate_sbm_cluster(100, 40, 4, 0.5, 0.05, 0.25, np.random.default_rng(3))
    edges = pairs = 0
    for inst in ds.instances:
        b = inst.y.argmax(axis=1)
        same = np.triu(b[:, None] == b[None, :], 1)
        edges += inst.graph.adj[same].sum()
        pairs += same.sum()
    assert abs(edges / pairs - 0.5) <= 0.02


def test_sbm_seed_fraction_controls_revealed_nodes():
    ds = generate_sbm_cluster(5, 40, 4, 0.5, 0.05, 0.25, np.random.default_rng(3))
    for inst in ds.instances:
        assert inst.graph.x[:, -1].sum() == 10
        hidden = inst.graph.x[:, -1] == 0
        assert np.all(inst.graph.x[hidden] == 0)


def test_planted_clique_in_empty_graph_separates_by_degree():
    ds = generate_planted_pattern(4, 20, 6, 0.0, 1.0, np.random.default_rng(1))
    for inst in ds.instances:
        on = inst.y[:, 1] == 1
        assert np.all(inst.graph.x[on, 0] > 0) and np.all(inst.graph.x[~on, 0] == 0)


def test_planted_pattern_label_balance_exact():
    ds = generate_planted_pattern(10, 30, 9, 0.1, 0.5, np.random.default_rng(2))
    ones = sum(inst.y[:, 1].sum() for inst in ds.instances)
    assert ones / (10 * 30) == 9 / 30


def test_planted_pattern_preconditions():
    with pytest.raises(ValueError):
        generate_planted_pattern(1, 10, 10, 0.1, 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        generate_planted_pattern(1, 10, 4, 0.5, 0.5, np.random.default_rng(0))


def test_triangles_k4_and_tree():
    k4 = np.ones((4, 4)) - np.eye(4)
    assert count_triangles(k4) == 4
    assert triangle_instance(k4).y[0, 0] == 1.0
    tree = np.zeros((5, 5))
    for child, parent in [(1, 0), (2, 0), (3, 1), (4, 1)]:
        tree[child, parent] = tree[parent, child] = 1
    assert triangle_instance(tree).y[0, 0] == 0.0


@given(st.integers(3, 12), st.floats(0.05, 0.95), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_triangle_count_matches_enumeration(n, p, seed):
    adj = random_adjacency(n, p, np.random.default_rng(seed))
    assert count_triangles(adj) == brute_force_triangles(adj)


def test_triangle_dataset_targets_match_enumeration():
    ds = generate_triangle_regression(10, (5, 10), 0.4, np.random.default_rng(4))
    for inst in ds.instances:
        assert inst.y[0, 0] == brute_force_triangles(inst.graph.adj) / inst.graph.n


@pytest.mark.parametrize(
    "make",
    [
        lambda r: generate_sbm_cluster(6, 10, 3, 0.6, 0.1, 0.3, r),
        lambda r: generate_planted_pattern(6, 10, 3, 0.1, 0.6, r),
        lambda r: generate_triangle_regression(6, (3, 9), 0.3, r),
    ],
)
def test_generation_is_reproducible_and_symmetric(make):
    a, b = make(np.random.default_rng(9)), make(np.random.default_rng(9))
    assert datasets_equal(a, b)
    for inst in a.instances:
        assert np.array_equal(inst.graph.adj, inst.graph.adj.T)
        assert np.all(np.diag(inst.graph.adj) == 0)


def test_round_trip_is_lossless(tmp_path):
    ds = generate_sbm_cluster(5, 10, 3, 0.6, 0.1, 0.3, np.random.default_rng(0), (0.6, 0.2, 0.2))
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert datasets_equal(ds, back)
    for p, q in zip(ds.instances, back.instances):
        assert np.array_equal(p.y, q.y) and np.array_equal(p.graph.x, q.graph.x) and p.split == q.split


def test_regression_round_trip_bitwise(tmp_path):
    ds = generate_triangle_regression(5, (4, 8), 0.5, np.random.default_rng(0))
    save_dataset(ds, tmp_path / "t.jsonl")
    back = load_dataset(tmp_path / "t.jsonl")
    assert all(np.array_equal(p.graph.x, q.graph.x) and np.array_equal(p.y, q.y) for p, q in zip(ds.instances, back.instances))


def test_empty_dataset_round_trip(tmp_path):
    save_dataset(Dataset([]), tmp_path / "e.jsonl")
    assert len(load_dataset(tmp_path / "e.jsonl")) == 0


def test_truncated_file_reports_line(tmp_path):
    ds = generate_sbm_cluster(3, 8, 2, 0.6, 0.1, 0.5, np.random.default_rng(0))
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(DatasetFormatError, match="line 3"):
        load_dataset(path)


def test_malformed_record_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"n": 1}\n')
    with pytest.raises(DatasetFormatError, match="line 1"):
        load_dataset(path)


def _graph_class_dataset(counts, rng):
    instances = []
    for k, c in enumerate(counts):
        for _ in range(c):
            g = Graph(rng.standard_normal((3, 2)), random_adjacency(3, 0.5, rng))
            instances.append(LabeledInstance(g, GRAPH_CLASSIFICATION, np.eye(len(counts))[[k]]))
    return Dataset(instances)


@given(st.lists(st.integers(1, 30), min_size=2, max_size=4), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_stratified_splits_preserve_proportions(counts, seed):
    rng = np.random.default_rng(seed)
    ds = assign_splits(_graph_class_dataset(counts, rng), (0.6, 0.2, 0.2), rng)
    for k, c in enumerate(counts):
        members = [i for i in ds.instances if i.y[0].argmax() == k]
        for name, frac in (("train", 0.6), ("val", 0.2), ("test", 0.2)):
            got = sum(i.split == name for i in members)
            assert abs(got - frac * c) <= 1


def test_dataset_rejects_mixed_tasks():
    g = Graph(np.ones((1, 1)), np.zeros((1, 1)))
    a = LabeledInstance(g, NODE_CLASSIFICATION, np.array([[1.0, 0.0]]))
    b = LabeledInstance(g, GRAPH_CLASSIFICATION, np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        Dataset([a, b])
