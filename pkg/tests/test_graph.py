from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import random_graph
from cores.graph import (
    FormatError,
    Graph,
    IngestionError,
    apply_action,
    batch,
    canonical_edges,
    dataset_stats,
    generate_ba_shapes,
    parse_tu_dataset,
    split_folds,
    split_sizes,
    write_tu_dataset,
)
from cores.tensor import ShapeError

MUTAG_DIR = Path(__file__).resolve().parents[1] / "data" / "MUTAG"


def test_subgraph_semantics_exhaustive():
    checked, bad = oracles.exhaustive_subgraph_check(max_nodes=6)
    assert checked > 100_000
    assert bad == []


def test_canonical_edges():
    edges = canonical_edges([(2, 0), (0, 2), (1, 1), (1, 0)], 3)
    np.testing.assert_array_equal(edges, [[0, 1], [0, 2]])
    with pytest.raises(ValueError):
        canonical_edges([(0, 3)], 3)


def test_graph_rejects_noncanonical_edges():
    with pytest.raises(ValueError):
        Graph(3, np.array([[1, 0]]), np.ones((3, 1)), 0)
    with pytest.raises(ShapeError):
        Graph(3, np.zeros((0, 2)), np.ones((2, 1)), 0)


def test_graph_arrays_are_read_only():
    g = Graph(2, np.array([[0, 1]]), np.ones((2, 1)), 0)
    with pytest.raises(ValueError):
        g.node_features[0, 0] = 5.0


def test_action_length_checked():
    g = Graph(3, np.array([[0, 1]]), np.ones((3, 1)), 0)
    with pytest.raises(ShapeError):
        apply_action(g, "node", [0, 1])
    with pytest.raises(ShapeError):
        apply_action(g, "edge", [0, 1])
    with pytest.raises(ValueError):
        apply_action(g, "both", [0, 0, 0])


def test_empty_subgraph_detection():
    g = Graph(2, np.array([[0, 1]]), np.ones((2, 1)), 0)
    assert apply_action(g, "node", [1, 1]).is_empty("node")
    assert apply_action(g, "edge", [1]).is_empty("edge")
    isolated = Graph(2, np.zeros((0, 2)), np.ones((2, 1)), 0)
    # nothing to remove in edge mode, so the unchanged graph is valid
    assert not apply_action(isolated, "edge", []).is_empty("edge")
    assert apply_action(isolated, "edge", []).edge_ratio == 1.0


def test_to_graph_relabels_nodes():
    g = Graph(4, canonical_edges([(0, 1), (1, 2), (2, 3)], 4), np.arange(4.0).reshape(4, 1), 1)
    small = apply_action(g, "node", [1, 0, 0, 0]).to_graph()
    np.testing.assert_array_equal(small.edges, [[0, 1], [1, 2]])
    np.testing.assert_array_equal(small.node_features.ravel(), [1.0, 2.0, 3.0])
    assert small.label == 1


@pytest.mark.skipif(not MUTAG_DIR.exists(), reason="MUTAG files not present")
def test_mutag_statistics():
    graphs = parse_tu_dataset(MUTAG_DIR, "MUTAG")
    stats = dataset_stats(graphs)
    assert stats["graphs"] == 188
    assert stats["features"] == 7
    assert stats["classes"] == 2
    assert stats["nodes_mean"] == pytest.approx(17.93, abs=0.01)
    assert stats["edges_mean"] == pytest.approx(19.79, abs=0.01)


def test_tu_roundtrip(tmp_path, rng):
    graphs = [random_graph(rng, 1, 7, dim=2) for _ in range(12)]
    write_tu_dataset(graphs, tmp_path, "TOY")
    back = parse_tu_dataset(tmp_path, "TOY")
    assert len(back) == len(graphs)
    assert all(a.same_as(b) for a, b in zip(graphs, back))


def test_tu_roundtrip_keeps_motif_mask(tmp_path):
    graphs = generate_ba_shapes(6, 8, seed=3)
    write_tu_dataset(graphs, tmp_path, "BA")
    back = parse_tu_dataset(tmp_path, "BA")
    for a, b in zip(graphs, back):
        np.testing.assert_array_equal(a.motif_mask, b.motif_mask)


def _write(tmp_path, files):
    for suffix, text in files.items():
        (tmp_path / f"T_{suffix}.txt").write_text(text)


def test_missing_file_is_ingestion_error(tmp_path):
    _write(tmp_path, {"A": "1, 2\n", "graph_indicator": "1\n1\n"})
    with pytest.raises(IngestionError):
        parse_tu_dataset(tmp_path, "T")


def test_dangling_edge_is_format_error(tmp_path):
    _write(tmp_path, {"A": "1, 5\n", "graph_indicator": "1\n1\n", "graph_labels": "1\n"})
    with pytest.raises(FormatError, match="nonexistent node"):
        parse_tu_dataset(tmp_path, "T")


def test_cross_graph_edge_is_format_error(tmp_path):
    _write(tmp_path, {"A": "1, 3\n", "graph_indicator": "1\n1\n2\n", "graph_labels": "1\n-1\n"})
    with pytest.raises(FormatError, match="crosses"):
        parse_tu_dataset(tmp_path, "T")


def test_labels_remapped_and_self_loops_dropped(tmp_path):
    _write(tmp_path, {"A": "1, 2\n2, 1\n2, 2\n", "graph_indicator": "1\n1\n2\n", "graph_labels": "1\n-1\n"})
    graphs = parse_tu_dataset(tmp_path, "T")
    assert [g.label for g in graphs] == [1, 0]
    assert graphs[0].num_edges == 1 and graphs[1].num_edges == 0


def test_ba_shapes_structure():
    graphs = generate_ba_shapes(20, 10, seed=0)
    assert sorted(np.bincount([g.label for g in graphs])) == [10, 10]
    for g in graphs:
        assert g.num_nodes == 15 and g.motif_mask.sum() == 5
        motif = np.flatnonzero(g.motif_mask)
        inside = [(u, v) for u, v in g.edges if u in motif and v in motif]
        assert len(inside) == (8 if g.label == 0 else 5)
        # a tree base plus the motif plus one bridge
        assert g.num_edges == 9 + len(inside) + 1
        np.testing.assert_array_equal(g.node_features[:, 1], np.bincount(g.edges.ravel(), minlength=15))


def test_ba_shapes_is_seeded():
    a, b = generate_ba_shapes(5, 8, 1), generate_ba_shapes(5, 8, 1)
    assert all(x.same_as(y) for x, y in zip(a, b))


@given(st.integers(1, 500), st.lists(st.floats(0.05, 1.0), min_size=3, max_size=3))
def test_split_sizes_sum_to_n(n, raw):
    ratios = [r / sum(raw) for r in raw]
    sizes = split_sizes(n, ratios)
    assert sum(sizes) == n
    assert all(abs(s - n * r) < 1 + 1e-9 for s, r in zip(sizes, ratios))


def test_split_folds_partition_and_stratify(small_dataset):
    folds = split_folds(small_dataset, (0.5, 0.25, 0.25), 3, seed=0)
    assert len(folds) == 3
    for f in folds:
        ids = f.train + f.val + f.test
        assert sorted(ids) == list(range(len(small_dataset)))
        labels = [small_dataset[i].label for i in f.train]
        assert abs(np.mean(labels) - 0.5) <= 0.1
    assert folds[0].test != folds[1].test
    assert split_folds(small_dataset, (0.5, 0.25, 0.25), 3, seed=0) == folds


def test_split_ratios_must_sum_to_one(small_dataset):
    with pytest.raises(ValueError):
        split_folds(small_dataset, (0.5, 0.2, 0.2), 1, 0)


def test_batch_offsets(rng):
    graphs = [random_graph(rng, 2, 5) for _ in range(3)]
    b = batch(graphs)
    assert b.num_nodes == sum(g.num_nodes for g in graphs)
    assert b.num_edges == sum(g.num_edges for g in graphs)
    np.testing.assert_array_equal(b.node_to_graph, np.repeat([0, 1, 2], [g.num_nodes for g in graphs]))
    for i, g in enumerate(graphs):
        local = b.edges[b.edge_to_graph == i] - b.node_offsets[i]
        np.testing.assert_array_equal(local, g.edges)
    assert (b.adjacency != b.adjacency.T).nnz == 0


def test_batch_rejects_mixed_feature_dims():
    with pytest.raises(ShapeError):
        batch([Graph(1, np.zeros((0, 2)), np.ones((1, 1)), 0), Graph(1, np.zeros((0, 2)), np.ones((1, 2)), 0)])
