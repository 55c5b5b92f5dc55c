"""Block adjacency construction and the three propagation variants."""

import numpy as np
import pytest

from sggkit import autodiff as ad
from sggkit.propagation import (
    BlockAdjacency,
    GatParams,
    GcnParams,
    GihParams,
    GraphState,
    build_adjacency,
    gat_forward,
    gcn_forward,
    gih_forward,
    init_gat_params,
    init_gcn_params,
    init_gih_params,
    normalized_node_adjacency,
    propagate,
)


def _state(rng, n, m, d):
    return GraphState(
        node_feats=ad.Matrix(rng.normal(size=(n, d))),
        edge_feats=ad.Matrix(rng.normal(size=(m, d))),
    )


def test_two_nodes_two_opposite_edges_hand_case():
    adj = build_adjacency(2, [(0, 1), (1, 0)])
    np.testing.assert_array_equal(adj.a_nn, [[0, 1], [1, 0]])
    np.testing.assert_array_equal(adj.a_ne, [[1, 1], [1, 1]])
    np.testing.assert_array_equal(adj.a_en, adj.a_ne.T)
    np.testing.assert_array_equal(adj.a_ee, [[0, 1], [1, 0]])
    np.testing.assert_array_equal(np.diag(adj.a), np.zeros(4))
    np.testing.assert_array_equal(np.diag(adj.a_tilde), np.ones(4))


def test_single_edge_has_no_opposite():
    adj = build_adjacency(3, [(0, 2)])
    np.testing.assert_array_equal(adj.a_ee, [[0]])
    np.testing.assert_array_equal(adj.a_nn, [[0, 0, 1], [0, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(adj.a_ne, [[1], [0], [1]])


def test_empty_edge_list():
    adj = build_adjacency(3, [])
    np.testing.assert_array_equal(adj.a, np.zeros((3, 3)))
    np.testing.assert_array_equal(adj.a_tilde, np.eye(3))


def test_adjacency_is_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n = int(rng.integers(2, 7))
        pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        take = rng.permutation(len(pairs))[: int(rng.integers(1, len(pairs) + 1))]
        edges = [pairs[t] for t in take]
        adj = build_adjacency(n, edges)
        np.testing.assert_array_equal(adj.a, adj.a.T)


def test_dangling_endpoint_rejected():
    with pytest.raises(ValueError, match=r"\(0, 5\)"):
        build_adjacency(3, [(0, 5)])


def test_self_loop_rejected():
    with pytest.raises(ValueError, match="self-loop"):
        build_adjacency(3, [(1, 1)])


def test_zero_weights_even_depth_is_exact_identity():
    rng = np.random.default_rng(1)
    n, m, d = 3, 4, 5
    state = _state(rng, n, m, d)
    edges = [(0, 1), (1, 0), (1, 2), (2, 0)]
    adj = build_adjacency(n, edges)
    params = GihParams([ad.Matrix(np.zeros((d, d))) for _ in range(4)])
    out = gih_forward(state, adj, params)
    np.testing.assert_array_equal(out.node_feats.data, state.node_feats.data)
    np.testing.assert_array_equal(out.edge_feats.data, state.edge_feats.data)


def test_identity_adjacency_identity_weights_doubles_nonneg_input():
    rng = np.random.default_rng(2)
    n, d = 4, 3
    state = GraphState(ad.Matrix(rng.uniform(0.0, 1.0, size=(n, d))), ad.Matrix(np.zeros((0, d))))
    adj = build_adjacency(n, [])
    params = GihParams([ad.Matrix(np.eye(d)), ad.Matrix(np.eye(d))])
    out = gih_forward(state, adj, params)
    np.testing.assert_allclose(out.node_feats.data, 2.0 * state.node_feats.data, atol=1e-15)


def test_matches_dense_reference_bit_exact():
    """Loop-free numpy transcription with the same (A~ G) W grouping."""
    rng = np.random.default_rng(3)
    n, d = 3, 4
    edges = [(0, 1), (1, 0)]
    m = len(edges)
    state = _state(rng, n, m, d)
    adj = build_adjacency(n, edges)
    params = init_gih_params(rng, d, 4)

    g_prev = {0: np.concatenate([state.node_feats.data, state.edge_feats.data], axis=0)}
    for l, w in enumerate(params.weights, start=1):
        h = np.maximum((adj.a_tilde @ g_prev[l - 1]) @ w.data, 0.0)
        g_prev[l] = h if l % 2 == 1 else g_prev[l - 2] + h
    expect = g_prev[4]

    out = gih_forward(state, adj, params)
    got = np.concatenate([out.node_feats.data, out.edge_feats.data], axis=0)
    assert got.tobytes() == expect.tobytes()


def test_state_shape_mismatch_raises():
    rng = np.random.default_rng(4)
    adj = build_adjacency(3, [(0, 1)])
    state = _state(rng, 3, 2, 4)  # adjacency has 1 edge, state has 2
    with pytest.raises(ad.ShapeError, match="do not match"):
        gih_forward(state, adj, init_gih_params(rng, 4))


def test_odd_layer_count_rejected():
    with pytest.raises(ValueError):
        init_gih_params(np.random.default_rng(0), 4, 3)


def test_locality_disconnected_component_unchanged():
    """Perturbing one component never moves features of the other."""
    rng = np.random.default_rng(5)
    d = 4
    edges = [(0, 1), (1, 0)]  # nodes 2, 3 are isolated from 0, 1
    adj = build_adjacency(4, edges)
    params = init_gih_params(rng, d, 4)
    base = _state(rng, 4, 2, d)
    out1 = gih_forward(base, adj, params)

    moved = GraphState(ad.Matrix(base.node_feats.data.copy()), ad.Matrix(base.edge_feats.data.copy()))
    moved.node_feats.data[0] += 10.0
    out2 = gih_forward(moved, adj, params)

    np.testing.assert_array_equal(out1.node_feats.data[2:], out2.node_feats.data[2:])
    assert np.abs(out1.node_feats.data[1] - out2.node_feats.data[1]).max() > 0


def test_gcn_zero_weights_zero_nodes_edges_untouched():
    rng = np.random.default_rng(6)
    n, m, d = 3, 2, 4
    state = _state(rng, n, m, d)
    adj = build_adjacency(n, [(0, 1), (1, 2)])
    params = GcnParams([ad.Matrix(np.zeros((d, d))) for _ in range(2)])
    out = gcn_forward(state, adj, params)
    np.testing.assert_array_equal(out.node_feats.data, np.zeros((n, d)))
    assert out.edge_feats is state.edge_feats


def test_gcn_path_graph_one_layer_hand_case():
    """4-node path 0-1-2-3, one layer, identity weights, nonneg input."""
    d = 2
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]])
    edges = [(0, 1), (1, 2), (2, 3)]
    adj = build_adjacency(4, edges)
    a_hat = adj.a_nn + np.eye(4)
    deg = a_hat.sum(axis=1)
    norm = a_hat / np.sqrt(deg)[:, None] / np.sqrt(deg)[None, :]
    expect = np.maximum(norm @ x, 0.0)
    state = GraphState(ad.Matrix(x), ad.Matrix(np.zeros((3, d))))
    out = gcn_forward(state, adj, GcnParams([ad.Matrix(np.eye(d))]))
    np.testing.assert_allclose(out.node_feats.data, expect, atol=1e-14)


def test_gat_constant_logits_equals_mean_aggregation():
    rng = np.random.default_rng(7)
    n, d = 4, 3
    # regular ring: every node has the same degree
    edges = [(0, 1), (1, 2), (2, 3), (3, 0)]
    adj = build_adjacency(n, edges)
    x = rng.normal(size=(n, d))
    w = rng.normal(size=(d, d))
    params = GatParams([(ad.Matrix(w), ad.Matrix(np.zeros((d, 1))), ad.Matrix(np.zeros((d, 1))))])
    state = GraphState(ad.Matrix(x), ad.Matrix(np.zeros((0, d))))
    out = gat_forward(state, adj, params)
    mask = (adj.a_nn + np.eye(n)) > 0
    hw = x @ w
    expect = np.maximum(np.stack([hw[mask[i]].mean(axis=0) for i in range(n)]), 0.0)
    np.testing.assert_allclose(out.node_feats.data, expect, atol=1e-12)


def test_gcn_gat_never_touch_edge_rows():
    rng = np.random.default_rng(8)
    n, m, d = 4, 3, 4
    state = _state(rng, n, m, d)
    adj = build_adjacency(n, [(0, 1), (1, 0), (2, 3)])
    for variant, params in [("gcn", init_gcn_params(rng, d)), ("gat", init_gat_params(rng, d))]:
        out = propagate(variant, state, adj, params)
        assert out.edge_feats is state.edge_feats, variant


def test_edge_awareness_separation():
    """Perturbing an edge row moves gih node outputs but not gcn/gat ones."""
    rng = np.random.default_rng(9)
    n, d = 3, 4
    edges = [(0, 1), (1, 0), (1, 2)]
    adj = build_adjacency(n, edges)
    base = _state(rng, n, len(edges), d)
    bumped = GraphState(
        ad.Matrix(base.node_feats.data.copy()),
        ad.Matrix(base.edge_feats.data + 5.0),
    )
    gih = init_gih_params(rng, d, 4)
    assert (
        np.abs(
            gih_forward(base, adj, gih).node_feats.data
            - gih_forward(bumped, adj, gih).node_feats.data
        ).max()
        > 1e-6
    )
    gcn = init_gcn_params(rng, d, 2)
    np.testing.assert_array_equal(
        gcn_forward(base, adj, gcn).node_feats.data,
        gcn_forward(bumped, adj, gcn).node_feats.data,
    )
    gat = init_gat_params(rng, d, 2)
    np.testing.assert_array_equal(
        gat_forward(base, adj, gat).node_feats.data,
        gat_forward(bumped, adj, gat).node_feats.data,
    )


def test_normalized_adjacency_rows():
    adj = build_adjacency(3, [(0, 1)])
    norm = normalized_node_adjacency(adj)
    np.testing.assert_allclose(norm, norm.T, atol=1e-15)
    assert norm[2, 2] == 1.0  # isolated node keeps only its self connection


def test_unknown_variant_raises():
    rng = np.random.default_rng(10)
    state = _state(rng, 2, 1, 3)
    adj = build_adjacency(2, [(0, 1)])
    with pytest.raises(ValueError, match="unknown propagation variant"):
        propagate("mlp", state, adj, None)


@pytest.mark.parametrize("variant", ["gih", "gcn", "gat"])
def test_gradients_per_variant(variant):
    rng = np.random.default_rng(11)
    n, d = 3, 3
    edges = [(0, 1), (1, 0), (1, 2)]
    adj = build_adjacency(n, edges)
    state = _state(rng, n, len(edges), d)
    if variant == "gih":
        params = init_gih_params(rng, d, 2)
        mats = list(params.weights)
    elif variant == "gcn":
        params = init_gcn_params(rng, d, 2)
        mats = list(params.weights)
    else:
        params = init_gat_params(rng, d, 2)
        mats = [m for layer in params.layers for m in layer]
    mats += [state.node_feats, state.edge_feats]

    def f():
        out = propagate(variant, state, adj, params)
        return ad.sum_all(
            ad.add(
                ad.mean_all(ad.pow_const(out.node_feats, 2.0)),
                ad.mean_all(ad.pow_const(out.edge_feats, 2.0)),
            )
        )

    assert ad.grad_check(f, mats, eps=1e-5) < 1e-6
