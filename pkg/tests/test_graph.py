import json

import numpy as np
import pytest
import scipy.sparse as sp

from gdiffuser.graph import (
    Graph, GraphError, block_diagonal_batch, build_csr, graph_from_record, graph_to_record, read_jsonl,
    row_normalize, write_jsonl,
)

from conftest import random_connected_graph


def test_build_csr_single_edge_is_mirrored():
    A = build_csr([(0, 1)], 2, symmetric=True)
    np.testing.assert_array_equal(A.to_dense(), [[0, 1], [1, 0]])


def test_build_csr_empty_graph():
    A = build_csr([], 3)
    assert A.nnz == 0
    np.testing.assert_array_equal(A.to_dense(), np.zeros((3, 3)))


def test_build_csr_collapses_duplicates():
    A = build_csr([(0, 1), (1, 2), (0, 1)], 3, symmetric=True)
    assert A.nnz == 4
    got = set(zip(A.row_indices().tolist(), A.col_indices.tolist()))
    assert got == {(0, 1), (1, 0), (1, 2), (2, 1)}
    dense = np.zeros((3, 3))
    for i, j in [(0, 1), (1, 2)]:
        dense[i, j] = dense[j, i] = 1
    np.testing.assert_array_equal(A.to_dense(), dense)


def test_build_csr_rejects_out_of_range():
    with pytest.raises(GraphError, match="out of range"):
        build_csr([(0, 3)], 3)


def test_build_csr_directed_keeps_orientation():
    A = build_csr([(0, 1)], 2, symmetric=False)
    np.testing.assert_array_equal(A.to_dense(), [[0, 1], [0, 0]])


def test_symmetric_csr_equals_transpose(rng):
    for _ in range(20):
        g = random_connected_graph(rng, int(rng.integers(2, 9)))
        A = g.adjacency()
        T = A.transpose()
        np.testing.assert_array_equal(A.row_offsets, T.row_offsets)
        np.testing.assert_array_equal(A.col_indices, T.col_indices)
        np.testing.assert_array_equal(A.value_array(), T.value_array())


def test_csr_matches_scipy(rng):
    g = random_connected_graph(rng, 7)
    A = g.adjacency()
    ref = sp.coo_matrix((np.ones(len(g.edge_list)), tuple(g.edge_list.T)), shape=(7, 7)).toarray()
    ref = ((ref + ref.T) > 0).astype(float)
    np.testing.assert_array_equal(A.to_dense(), ref)
    np.testing.assert_array_equal(A.to_scipy().toarray(), ref)


@pytest.mark.parametrize("row,expected", [
    ([1.0, 1.0], [0.5, 0.5]),
    ([0.0, 0.0], [0.0, 0.0]),
    ([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]),
])
def test_row_normalize_examples(row, expected):
    n = len(row)
    M = np.zeros((n, n))
    M[0] = row
    A = build_csr([(0, j) for j in range(n)], n, symmetric=False).with_values(np.asarray(row))
    A = A.with_values(np.asarray(row, dtype=float))
    out = row_normalize(A).to_dense()
    np.testing.assert_allclose(out[0], expected, atol=1e-15)


def test_row_normalize_row_sums(rng):
    for _ in range(30):
        n = int(rng.integers(1, 10))
        edges = [(int(a), int(b)) for a, b in rng.integers(0, n, size=(int(rng.integers(0, 12)), 2)) if a != b]
        A = build_csr(edges, n)
        A = A.with_values(rng.uniform(0.1, 5.0, size=A.nnz))
        sums = row_normalize(A).to_dense().sum(axis=1)
        has = A.to_dense().sum(axis=1) > 0
        assert np.all(np.abs(sums[has] - 1) < 1e-12)
        assert np.all(sums[~has] == 0)


def test_row_normalize_rejects_negative():
    A = build_csr([(0, 1)], 2).with_values(np.array([1.0, -1.0]))
    with pytest.raises(GraphError):
        row_normalize(A)


def test_isolated_node_row_is_zero():
    g = Graph(3, np.zeros((3, 1)), np.array([[0, 1]]))
    P = row_normalize(g.adjacency()).to_dense()
    np.testing.assert_array_equal(P[2], 0)


def test_block_diagonal_batch_counts():
    g1 = Graph(2, np.zeros((2, 1)), np.array([[0, 1]]))
    g2 = Graph(3, np.zeros((3, 1)), np.array([[0, 1], [1, 2]]))
    b = block_diagonal_batch([g1, g2])
    assert b.num_nodes == 5
    np.testing.assert_array_equal(b.node_offsets, [0, 2, 5])
    assert b.block_mask.sum() == 13


def test_block_diagonal_single_graph_mask_all_true():
    g = Graph(4, np.zeros((4, 1)), np.array([[0, 1], [2, 3]]))
    assert block_diagonal_batch([g]).block_mask.all()


def test_block_diagonal_two_singletons_identity_mask():
    g = Graph(1, np.zeros((1, 1)), np.zeros((0, 2), dtype=int))
    np.testing.assert_array_equal(block_diagonal_batch([g, g]).block_mask, np.eye(2, dtype=bool))


def test_block_extraction_recovers_members(rng):
    graphs = [random_connected_graph(rng, int(n)) for n in rng.integers(1, 7, size=5)]
    b = block_diagonal_batch(graphs)
    A = b.adjacency().to_dense()
    off = b.node_offsets
    for i, g in enumerate(graphs):
        blk = A[off[i]:off[i + 1], off[i]:off[i + 1]]
        np.testing.assert_array_equal(blk, g.adjacency().to_dense())
    outside = A.copy()
    for i in range(len(graphs)):
        outside[off[i]:off[i + 1], off[i]:off[i + 1]] = 0
    assert not outside.any()
    np.testing.assert_array_equal(b.node_features, np.concatenate([g.node_features for g in graphs]))


def test_graph_validation():
    with pytest.raises(GraphError):
        Graph(2, np.zeros((3, 1)), np.array([[0, 1]]))
    with pytest.raises(GraphError):
        Graph(2, np.zeros((2, 1)), np.array([[0, 2]]))
    with pytest.raises(GraphError):
        Graph(2, np.zeros((2, 1)), np.array([[0, 1]]), labels=np.array([0]))


def test_permute_relabels_adjacency(rng):
    g = random_connected_graph(rng, 6)
    perm = rng.permutation(6)
    h = g.permute(perm)
    P = np.eye(6)[perm].T          # P[perm[i], i] = 1
    np.testing.assert_array_equal(h.adjacency().to_dense(), P @ g.adjacency().to_dense() @ P.T)
    np.testing.assert_array_equal(h.node_features[perm], g.node_features)
    np.testing.assert_array_equal(h.labels[perm], g.labels)


def test_jsonl_round_trip(tmp_path, rng):
    graphs = [random_connected_graph(rng, int(n)) for n in (1, 3, 5)]
    graphs.append(Graph(2, np.ones((2, 2)), np.array([[0, 1]]), edge_features=np.array([[0.5, 2.0]]),
                        attributes={"rows": 1, "cols": 2}))
    path = tmp_path / "g.jsonl"
    write_jsonl(path, graphs)
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert set(rec) >= {"num_nodes", "edges", "node_features"}
    back = read_jsonl(path)
    for a, b in zip(graphs, back):
        assert a.num_nodes == b.num_nodes
        np.testing.assert_array_equal(a.edge_list, b.edge_list)
        np.testing.assert_array_equal(a.node_features, b.node_features)
        if a.labels is not None:
            np.testing.assert_array_equal(a.labels, b.labels)
    assert back[3].attributes == {"rows": 1, "cols": 2}
    np.testing.assert_array_equal(back[3].edge_features, [[0.5, 2.0]])


def test_record_stores_undirected_edges_once():
    rec = {"num_nodes": 3, "edges": [[0, 1], [1, 2]], "node_features": [[1], [0], [1]]}
    g = graph_from_record(rec)
    assert g.adjacency().nnz == 4
    assert graph_to_record(g)["edges"] == [[0, 1], [1, 2]]
