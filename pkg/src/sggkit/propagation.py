"""Joint message passing over entity nodes and relation edges.

Nodes and edges are stacked into one feature matrix G = [N; E] and mixed
through a block adjacency A of side (n_nodes + n_edges):

    A_nn[i][j] = 1  iff some edge connects i and j in either direction
    A_ne[i][m] = 1  iff node i is the subject or object of edge m
    A_en       = A_ne transposed
    A_ee[m][m'] = 1 iff m' joins the same node pair as m in the opposite direction

Self connections come only from the augmentation A~ = A + I. Layers follow

    odd  l:  G(l) = max(0, A~ G(l-1) W(l))
    even l:  G(l) = G(l-2) + max(0, A~ G(l-1) W(l))

with square per-layer weights, no degree normalization, and matmuls grouped
as (A~ G) W. Zero weights therefore make an even-depth stack an exact
identity. The gcn and gat baselines update node rows only and leave edge
rows untouched, which is what the edge-awareness comparisons rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Matrix,
    ShapeError,
    add,
    concat_rows,
    leaky_relu,
    linear_map,
    masked_softmax_rows,
    matmul,
    relu,
    slice_rows,
    transpose,
    uniform_init,
)


@dataclass
class BlockAdjacency:
    n_nodes: int
    n_edges: int
    a: np.ndarray        # (n+m) x (n+m), zero diagonal
    a_tilde: np.ndarray  # a + I

    @property
    def a_nn(self) -> np.ndarray:
        return self.a[: self.n_nodes, : self.n_nodes]

    @property
    def a_ne(self) -> np.ndarray:
        return self.a[: self.n_nodes, self.n_nodes :]

    @property
    def a_en(self) -> np.ndarray:
        return self.a[self.n_nodes :, : self.n_nodes]

    @property
    def a_ee(self) -> np.ndarray:
        return self.a[self.n_nodes :, self.n_nodes :]


def build_adjacency(n_nodes: int, edges: list[tuple[int, int]]) -> BlockAdjacency:
    """Assemble the block adjacency for directed candidate edges."""
    m = len(edges)
    for s, o in edges:
        if not (0 <= s < n_nodes and 0 <= o < n_nodes):
            raise ValueError(f"edge ({s}, {o}) has an endpoint outside 0..{n_nodes - 1}")
        if s == o:
            raise ValueError(f"self-loop edge ({s}, {o}) is not allowed")
    size = n_nodes + m
    a = np.zeros((size, size))
    reverse = {}
    for mi, (s, o) in enumerate(edges):
        a[s, o] = a[o, s] = 1.0
        a[s, n_nodes + mi] = a[o, n_nodes + mi] = 1.0
        a[n_nodes + mi, s] = a[n_nodes + mi, o] = 1.0
        reverse.setdefault((s, o), []).append(mi)
    for mi, (s, o) in enumerate(edges):
        for mj in reverse.get((o, s), ()):
            a[n_nodes + mi, n_nodes + mj] = 1.0
    return BlockAdjacency(n_nodes, m, a, a + np.eye(size))


@dataclass
class GraphState:
    node_feats: Matrix
    edge_feats: Matrix


@dataclass
class GihParams:
    weights: list[Matrix]  # one square D x D matrix per layer


def init_gih_params(rng: np.random.Generator, d: int, n_layers: int = 4) -> GihParams:
    if n_layers < 2 or n_layers % 2 != 0:
        raise ValueError(f"layer count must be even and >= 2, got {n_layers}")
    # The unnormalized block adjacency multiplies feature magnitudes by its
    # spectral radius (about 9 when every ordered pair of 6 nodes is a
    # candidate edge), so the weights start 10x smaller than plain fan-in
    # scaling to keep a 4-layer stack near unit gain.
    return GihParams([uniform_init(rng, d, d, fan_in=100 * d) for _ in range(n_layers)])


def _check_state(state: GraphState, adj: BlockAdjacency) -> None:
    if state.node_feats.rows != adj.n_nodes or state.edge_feats.rows != adj.n_edges:
        raise ShapeError(
            f"state rows ({state.node_feats.rows} nodes, {state.edge_feats.rows} edges) "
            f"do not match adjacency ({adj.n_nodes} nodes, {adj.n_edges} edges)"
        )
    if state.node_feats.cols != state.edge_feats.cols:
        raise ShapeError(
            f"node width {state.node_feats.cols} differs from edge width {state.edge_feats.cols}"
        )


def gih_forward(state: GraphState, adj: BlockAdjacency, params: GihParams) -> GraphState:
    _check_state(state, adj)
    at = Matrix(adj.a_tilde)
    g = concat_rows([state.node_feats, state.edge_feats])
    prev = {0: g}
    for l, w in enumerate(params.weights, start=1):
        h = relu(matmul(matmul(at, prev[l - 1]), w))
        prev[l] = h if l % 2 == 1 else add(prev[l - 2], h)
    out = prev[len(params.weights)]
    n = adj.n_nodes
    return GraphState(slice_rows(out, 0, n), slice_rows(out, n, n + adj.n_edges))


@dataclass
class GcnParams:
    weights: list[Matrix]


def init_gcn_params(rng: np.random.Generator, d: int, n_layers: int = 4) -> GcnParams:
    if n_layers < 1:
        raise ValueError(f"layer count must be >= 1, got {n_layers}")
    return GcnParams([uniform_init(rng, d, d) for _ in range(n_layers)])


def normalized_node_adjacency(adj: BlockAdjacency) -> np.ndarray:
    """Symmetric normalization D^-1/2 (A_nn + I) D^-1/2."""
    a_hat = adj.a_nn + np.eye(adj.n_nodes)
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def gcn_forward(state: GraphState, adj: BlockAdjacency, params: GcnParams) -> GraphState:
    """Standard graph convolution over node rows only; edge rows pass through."""
    if state.node_feats.rows != adj.n_nodes:
        raise ShapeError(f"state has {state.node_feats.rows} node rows, adjacency {adj.n_nodes}")
    a_hat = Matrix(normalized_node_adjacency(adj))
    h = state.node_feats
    for w in params.weights:
        h = relu(matmul(matmul(a_hat, h), w))
    return GraphState(h, state.edge_feats)


@dataclass
class GatParams:
    layers: list[tuple[Matrix, Matrix, Matrix]]  # (w, a_src, a_dst) per layer


def init_gat_params(rng: np.random.Generator, d: int, n_layers: int = 4) -> GatParams:
    if n_layers < 1:
        raise ValueError(f"layer count must be >= 1, got {n_layers}")
    layers = []
    for _ in range(n_layers):
        layers.append(
            (
                uniform_init(rng, d, d),
                uniform_init(rng, d, 1, fan_in=2 * d),
                uniform_init(rng, d, 1, fan_in=2 * d),
            )
        )
    return GatParams(layers)


def gat_forward(state: GraphState, adj: BlockAdjacency, params: GatParams) -> GraphState:
    """Attention over node neighbourhoods (self included); edge rows pass through."""
    if state.node_feats.rows != adj.n_nodes:
        raise ShapeError(f"state has {state.node_feats.rows} node rows, adjacency {adj.n_nodes}")
    n = adj.n_nodes
    mask = (adj.a_nn + np.eye(n)) > 0
    ones_row = Matrix(np.ones((1, n)))
    ones_col = Matrix(np.ones((n, 1)))
    h = state.node_feats
    for w, a_src, a_dst in params.layers:
        hw = matmul(h, w)
        src = matmul(hw, a_src)  # n x 1
        dst = matmul(hw, a_dst)  # n x 1
        logits = leaky_relu(add(matmul(src, ones_row), matmul(ones_col, transpose(dst))), 0.2)
        alpha = masked_softmax_rows(logits, mask)
        h = relu(matmul(alpha, hw))
    return GraphState(h, state.edge_feats)


def propagate(variant: str, state: GraphState, adj: BlockAdjacency, params) -> GraphState:
    if variant == "gih":
        return gih_forward(state, adj, params)
    if variant == "gcn":
        return gcn_forward(state, adj, params)
    if variant == "gat":
        return gat_forward(state, adj, params)
    if variant == "none":
        return state
    raise ValueError(f"unknown propagation variant {variant!r}")
