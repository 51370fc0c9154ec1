import numpy as np
import pytest

from gdiffuser import oracles
from gdiffuser.autograd import BatchNormState, Tensor, gradient_errors, no_grad
from gdiffuser.autograd.params import init_params
from gdiffuser.graph import Graph, build_csr, row_normalize
from gdiffuser.virtual_edges import (
    EdgeFfnLayer, EdgeFfnParams, PeParams, VirtualEdges, WeightedAdjParams, edge_ffn, edge_ffn_spec,
    raw_walk_stack, self_edge_encoding, stack_powers, weighted_adjacency, weighted_adjacency_spec,
    zero_weighted_adjacency_params,
)

from conftest import all_connected_graphs, random_connected_graph


def wadj_params(d, seed, d_edge=0):
    p = init_params(weighted_adjacency_spec(d, d_edge), seed)
    p.add_norm("wadj.bn", 2 * d)
    return WeightedAdjParams.from_params(p), p


def effn_params(k, seed, layers=2):
    p = init_params(edge_ffn_spec(k, num_layers=layers), seed)
    c = k + 1
    p.add_norm("effn.bn_in", c)
    for i in range(layers):
        p.add_norm(f"effn.layers.{i}.bn", 2 * c)
    return EdgeFfnParams.from_params(p, num_layers=layers), p


def path(n):
    return Graph(n, np.eye(n), np.array([[i, i + 1] for i in range(n - 1)]).reshape(-1, 2))


# -- stack_powers --------------------------------------------------------------

def test_two_cycle_alternates():
    A = row_normalize(build_csr([(0, 1)], 2))
    E = stack_powers(A, 2).E.data
    np.testing.assert_array_equal(E[..., 0], np.eye(2))
    np.testing.assert_array_equal(E[..., 1], [[0, 1], [1, 0]])
    np.testing.assert_array_equal(E[..., 2], np.eye(2))


def test_path_square():
    E = stack_powers(row_normalize(path(3).adjacency()), 2).E.data
    np.testing.assert_allclose(E[..., 1], [[0, 1, 0], [.5, 0, .5], [0, 1, 0]], atol=1e-15)
    np.testing.assert_allclose(E[..., 2], [[.5, 0, .5], [0, 1, 0], [.5, 0, .5]], atol=1e-15)
    np.testing.assert_allclose(oracles.walk_probabilities(3, [(0, 1), (1, 2)], 2)[..., 2], E[..., 2], atol=1e-15)


def test_stack_metadata():
    ve = stack_powers(row_normalize(path(4).adjacency()), 3)
    assert isinstance(ve, VirtualEdges) and ve.k == 3 and not ve.mixed and ve.num_channels == 4
    assert ve.E.shape == (4, 4, 4)


@pytest.mark.parametrize("n", range(1, 6))
def test_raw_stack_matches_walk_enumeration_exhaustive(n):
    k = 4
    for edges in all_connected_graphs(n):
        g = Graph(n, np.zeros((n, 1)), np.array(edges, dtype=np.int64).reshape(-1, 2))
        A = row_normalize(g.adjacency())
        E = raw_walk_stack(A, k)
        ref = oracles.walk_probabilities(n, edges, k)
        assert np.abs(E - ref).max() < 1e-10
        if n > 1:
            assert np.abs(E.sum(axis=1) - 1).max() < 1e-10


def test_raw_stack_matches_walk_enumeration_n6(rng):
    for _ in range(40):
        g = random_connected_graph(rng, 6, p=float(rng.uniform(0, 1)))
        E = raw_walk_stack(row_normalize(g.adjacency()), 4)
        assert np.abs(E - oracles.walk_probabilities(6, g.edge_list, 4)).max() < 1e-10


def test_isolated_rows_stay_zero_past_identity():
    g = Graph(3, np.zeros((3, 1)), np.array([[0, 1]]))
    E = raw_walk_stack(row_normalize(g.adjacency()), 3)
    assert E[2, 2, 0] == 1 and not E[2, :, 1:].any()


def test_sparse_and_dense_paths_agree(rng):
    for _ in range(10):
        g = random_connected_graph(rng, int(rng.integers(2, 8)))
        A = row_normalize(g.adjacency())
        np.testing.assert_allclose(stack_powers(A, 5).E.data, raw_walk_stack(A, 5), atol=1e-14)


def test_stack_powers_equivariance(rng):
    for _ in range(20):
        g = random_connected_graph(rng, int(rng.integers(2, 8)))
        perm = rng.permutation(g.num_nodes)
        E = stack_powers(row_normalize(g.adjacency()), 4).E.data
        Ep = stack_powers(row_normalize(g.permute(perm).adjacency()), 4).E.data
        np.testing.assert_allclose(Ep[np.ix_(perm, perm)], E, atol=1e-12)


def test_stack_powers_rejects_bad_k():
    with pytest.raises(ValueError):
        stack_powers(row_normalize(path(3).adjacency()), 0)


# -- weighted adjacency --------------------------------------------------------

def test_zero_params_reduce_to_row_normalize(rng):
    for _ in range(20):
        g = random_connected_graph(rng, int(rng.integers(1, 8)), features=4)
        A = weighted_adjacency(Tensor(g.node_features), None, g.adjacency(), zero_weighted_adjacency_params(4))
        np.testing.assert_allclose(A.to_dense(), row_normalize(g.adjacency()).to_dense(), atol=1e-12)
        with no_grad():
            E1 = stack_powers(A, 4).E.data
        E2 = raw_walk_stack(row_normalize(g.adjacency()), 4)
        np.testing.assert_allclose(E1, E2, atol=1e-12)


def test_single_neighbour_gets_weight_one():
    wp, _ = wadj_params(3, seed=1)
    g = path(3)
    X = np.random.default_rng(0).normal(size=(3, 3))
    D = weighted_adjacency(Tensor(X), None, g.adjacency(), wp).to_dense()
    assert D[0, 1] == 1.0 and D[2, 1] == 1.0


def test_random_params_path_rows_stochastic_same_pattern(rng):
    for seed in range(10):
        wp, _ = wadj_params(3, seed=seed)
        g = random_connected_graph(rng, 6, features=3)
        A = weighted_adjacency(Tensor(g.node_features), None, g.adjacency(), wp)
        np.testing.assert_array_equal(A.col_indices, g.adjacency().col_indices)
        np.testing.assert_array_equal(A.row_offsets, g.adjacency().row_offsets)
        v = A.value_array()
        assert np.all((v > 0) & (v <= 1))
        assert np.abs(A.to_dense().sum(axis=1) - 1).max() < 1e-12


def test_weighted_adjacency_uses_edge_features(rng):
    wp, _ = wadj_params(2, seed=0, d_edge=2)
    g = random_connected_graph(rng, 5, features=2)
    ef = rng.normal(size=(g.adjacency().nnz, 2))
    a = weighted_adjacency(Tensor(g.node_features), ef, g.adjacency(), wp).to_dense()
    b = weighted_adjacency(Tensor(g.node_features), ef * 0, g.adjacency(), wp).to_dense()
    assert np.abs(a - b).max() > 1e-6


def test_weighted_adjacency_gradients_flow_end_to_end(rng):
    wp, p = wadj_params(3, seed=2)
    g = random_connected_graph(rng, 5, features=3)
    x = Tensor(g.node_features.copy(), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 5, 4)))
    f = lambda: (stack_powers(weighted_adjacency(x, None, g.adjacency(), wp), 3).E * w).sum()
    errs = gradient_errors(f, {**dict(p.items()), "x": x}, max_coords=None)
    assert max(errs.values()) < 1e-4


# -- edge FFN -------------------------------------------------------------------

def test_edge_ffn_zero_weights_is_identity(rng):
    k = 3
    params, p = effn_params(k, seed=0)
    for t in p.values():
        if t.data.ndim == 2 or t is params.layers[0].b1:
            t.data[...] = 0
    for layer in params.layers:
        layer.w1.data[...] = 0
        layer.b1.data[...] = 0
        layer.w2.data[...] = 0
        layer.b2.data[...] = 0
    params.in_bn.eps = 0.0      # exact bypass: unit running variance, no epsilon
    E = raw_walk_stack(row_normalize(random_connected_graph(rng, 5).adjacency()), k)
    out = edge_ffn(VirtualEdges(Tensor(E), k), params, training=False)
    assert out.mixed
    np.testing.assert_array_equal(out.E.data, E)


def test_edge_ffn_is_slotwise(rng):
    params, _ = effn_params(4, seed=1)
    for s in [params.in_bn] + [l.bn for l in params.layers]:
        s.running_mean[:] = rng.normal(size=s.running_mean.shape)
    g = random_connected_graph(rng, 6)
    perm = rng.permutation(6)
    E = raw_walk_stack(row_normalize(g.adjacency()), 4)
    Ep = raw_walk_stack(row_normalize(g.permute(perm).adjacency()), 4)
    a = edge_ffn(Tensor(E), params).E.data
    b = edge_ffn(Tensor(Ep), params).E.data
    np.testing.assert_allclose(b[np.ix_(perm, perm)], a, atol=1e-12)
    # training-mode statistics are permutation-invariant too
    a = edge_ffn(Tensor(E), params, training=True).E.data
    b = edge_ffn(Tensor(Ep), params, training=True).E.data
    np.testing.assert_allclose(b[np.ix_(perm, perm)], a, atol=1e-12)


def test_edge_ffn_gradcheck(rng):
    params, p = effn_params(3, seed=2)
    E = Tensor(raw_walk_stack(row_normalize(random_connected_graph(rng, 4).adjacency()), 3), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4, 4)))
    errs = gradient_errors(lambda: (edge_ffn(E, params).E * w).sum(), {**dict(p.items()), "E": E},
                           max_coords=None)
    assert max(errs.values()) < 1e-4
    f = lambda: (edge_ffn(E, params, training=True).E * w).sum()
    # a bias feeding a batch-statistics norm has an identically zero gradient
    pre_bn = {f"effn.layers.{i}.b1" for i in range(2)}
    errs = gradient_errors(f, {k: v for k, v in p.items() if k not in pre_bn}, max_coords=None)
    assert max(errs.values()) < 1e-4
    for k in pre_bn:
        p[k].grad = None
    f().backward()
    for k in pre_bn:
        assert np.abs(p[k].grad).max() < 1e-12


def test_edge_ffn_rejects_mixed_input():
    params, _ = effn_params(2, seed=0)
    with pytest.raises(ValueError):
        edge_ffn(VirtualEdges(Tensor(np.zeros((2, 2, 3))), 2, mixed=True), params)


def test_edge_ffn_mask_zeroes_padding_and_isolates_stats(rng):
    params, _ = effn_params(2, seed=3)
    E = raw_walk_stack(row_normalize(path(3).adjacency()), 2)
    pad = np.zeros((5, 5, 3))
    pad[:3, :3] = E
    mask = np.zeros((5, 5))
    mask[:3, :3] = 1
    out = edge_ffn(Tensor(pad), params, training=True, mask=mask).E.data
    ref = edge_ffn(Tensor(E), params, training=True).E.data
    np.testing.assert_allclose(out[:3, :3], ref, atol=1e-12)
    assert not out[3:].any() and not out[:, 3:].any()


# -- self-edge encoding -----------------------------------------------------

def test_pe_zero_weights():
    E = raw_walk_stack(row_normalize(path(4).adjacency()), 3)
    out = self_edge_encoding(VirtualEdges(Tensor(E), 3), PeParams(Tensor(np.zeros((4, 5))))).data
    np.testing.assert_array_equal(out, np.zeros((4, 5)))


def test_pe_identity_channel():
    E = raw_walk_stack(row_normalize(path(4).adjacency()), 3)
    w = np.zeros((4, 2))
    w[0, 0] = 1.0
    out = self_edge_encoding(Tensor(E), PeParams(Tensor(w))).data
    np.testing.assert_array_equal(out[:, 0], np.ones(4))


def test_pe_nonnegative(rng):
    E = rng.normal(size=(5, 5, 4))
    out = self_edge_encoding(Tensor(E), PeParams(Tensor(rng.normal(size=(4, 6))))).data
    assert (out >= 0).all()
