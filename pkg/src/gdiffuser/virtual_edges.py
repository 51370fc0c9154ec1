"""Virtual edges: stacked random-walk powers, learned adjacency, edge-wise FFN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autograd import functional as F
from .autograd.params import ModelParams
from .autograd.tensor import BatchNormState, Function, ShapeError, Tensor
from .graph import SparseRowMatrix


@dataclass
class VirtualEdges:
    """Rank-3 (or batched rank-4) tensor of per-pair walk features.

    Channel ``t`` of an unmixed stack holds ``t``-step landing probabilities.
    """

    E: Tensor
    k: int
    mixed: bool = False

    @property
    def num_channels(self) -> int:
        return self.E.shape[-1]


@dataclass
class WeightedAdjParams:
    w1: Tensor
    b1: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn: BatchNormState
    w2: Tensor
    b2: Tensor

    @classmethod
    def from_params(cls, params: ModelParams, prefix: str = "wadj"):
        p = lambda n: params[f"{prefix}.{n}"]
        return cls(p("w1"), p("b1"), p("bn.gamma"), p("bn.beta"), params.norms[f"{prefix}.bn"], p("w2"), p("b2"))


@dataclass
class EdgeFfnLayer:
    w1: Tensor
    b1: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn: BatchNormState
    w2: Tensor
    b2: Tensor


@dataclass
class EdgeFfnParams:
    in_gamma: Tensor
    in_beta: Tensor
    in_bn: BatchNormState
    layers: list

    @classmethod
    def from_params(cls, params: ModelParams, prefix: str = "effn", num_layers: int = 2):
        p = lambda n: params[f"{prefix}.{n}"]
        layers = []
        for i in range(num_layers):
            q = f"layers.{i}"
            layers.append(EdgeFfnLayer(
                p(f"{q}.w1"), p(f"{q}.b1"), p(f"{q}.bn.gamma"), p(f"{q}.bn.beta"),
                params.norms[f"{prefix}.{q}.bn"], p(f"{q}.w2"), p(f"{q}.b2"),
            ))
        return cls(p("bn_in.gamma"), p("bn_in.beta"), params.norms[f"{prefix}.bn_in"], layers)


@dataclass
class PeParams:
    w_pe: Tensor


def zero_weighted_adjacency_params(d: int, d_edge: int = 0, dtype=np.float64) -> WeightedAdjParams:
    """All-zero scorer: every stored edge gets weight sigmoid(0), so the
    learned adjacency reduces to the plain row-normalised one."""
    z = {name.split(".", 1)[1]: Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
         for name, shape, _ in weighted_adjacency_spec(d, d_edge)}
    return WeightedAdjParams(z["w1"], z["b1"], z["bn.gamma"], z["bn.beta"], BatchNormState(2 * d, dtype=dtype),
                             z["w2"], z["b2"])


def weighted_adjacency_spec(d: int, d_edge: int = 0, prefix: str = "wadj"):
    return [
        (f"{prefix}.w1", (2 * d + d_edge, 2 * d), "linear_weight"),
        (f"{prefix}.b1", (2 * d,), "bias"),
        (f"{prefix}.bn.gamma", (2 * d,), "bn_gamma"),
        (f"{prefix}.bn.beta", (2 * d,), "bn_beta"),
        (f"{prefix}.w2", (2 * d, 1), "linear_weight"),
        (f"{prefix}.b2", (1,), "bias"),
    ]


def edge_ffn_spec(k: int, hidden: int | None = None, num_layers: int = 2, prefix: str = "effn"):
    c = k + 1
    h = hidden or 2 * c
    spec = [(f"{prefix}.bn_in.gamma", (c,), "bn_gamma"), (f"{prefix}.bn_in.beta", (c,), "bn_beta")]
    for i in range(num_layers):
        q = f"{prefix}.layers.{i}"
        spec += [
            (f"{q}.w1", (c, h), "linear_weight"),
            (f"{q}.b1", (h,), "bias"),
            (f"{q}.bn.gamma", (h,), "bn_gamma"),
            (f"{q}.bn.beta", (h,), "bn_beta"),
            (f"{q}.w2", (h, c), "linear_weight"),
            (f"{q}.b2", (c,), "bias"),
        ]
    return spec


# -- learned adjacency -----------------------------------------------------

def edge_scores(x_src: Tensor, x_dst: Tensor, edge_feats, params: WeightedAdjParams, training: bool,
                mask=None) -> Tensor:
    """sigmoid(second-linear(ReLU(BN(first-linear([x_i ; x_j ; e_ij]))))) per edge."""
    parts = [x_src, x_dst]
    if edge_feats is not None:
        parts.append(F.as_tensor(edge_feats, dtype=x_src.dtype))
    z = F.concat(parts, axis=-1)
    if z.shape[-1] != params.w1.shape[0]:
        raise ShapeError(f"weighted adjacency input width {z.shape[-1]} != w1 rows {params.w1.shape[0]}")
    h = F.linear(z, params.w1, params.b1)
    h = F.relu(F.batch_norm(h, params.bn_gamma, params.bn_beta, params.bn, training, mask=mask))
    s = F.linear(h, params.w2, params.b2)
    return F.sigmoid(s.reshape(s.shape[:-1]))


def weighted_adjacency(X, edge_features, A_pattern: SparseRowMatrix, params: WeightedAdjParams,
                       training: bool = False) -> SparseRowMatrix:
    """Learned, L1 row-normalised adjacency over the stored pattern of ``A_pattern``.

    ``edge_features`` (or None) is aligned with the stored entries. The
    returned matrix carries a differentiable :class:`Tensor` as ``values``.
    """
    X = F.as_tensor(X)
    n = A_pattern.num_rows
    if X.shape[0] != n:
        raise ShapeError(f"X has {X.shape[0]} rows, adjacency has {n}")
    rows, cols = A_pattern.row_indices(), A_pattern.col_indices
    if A_pattern.nnz == 0:
        return A_pattern.with_values(Tensor(np.zeros(0, dtype=X.dtype)))
    s = edge_scores(X[rows], X[cols], edge_features, params, training)
    dense = F.l1_row_normalize(F.scatter(s, (rows, cols), (n, n)))
    return A_pattern.with_values(dense[rows, cols])


def weighted_adjacency_dense(X: Tensor, edge_index, edge_features, params: WeightedAdjParams,
                             training: bool) -> Tensor:
    """Batched learned adjacency as a dense ``[B, n, n]`` row-stochastic tensor.

    ``edge_index`` is a triple of arrays ``(graph, src, dst)`` into the padded
    ``[B, n, d]`` node tensor ``X``.
    """
    b, i, j = edge_index
    B, n = X.shape[0], X.shape[1]
    if b.size == 0:
        return Tensor(np.zeros((B, n, n), dtype=X.dtype))
    s = edge_scores(X[b, i], X[b, j], edge_features, params, training)
    return F.l1_row_normalize(F.scatter(s, (b, i, j), (B, n, n)))


# -- stacked powers --------------------------------------------------------

class SpMM(Function):
    """Sparse (pattern, values) times dense; differentiable in both values and dense."""

    def forward(self, values, dense, rows, cols, offsets, shape):
        self.rows, self.cols = rows, cols
        self.values, self.dense = values, dense
        self.A = sp.csr_matrix((values, cols, offsets), shape=shape)
        out = self.A @ dense.reshape(dense.shape[0], -1)
        return np.asarray(out).reshape((shape[0],) + dense.shape[1:])

    def backward(self, g):
        g2 = g.reshape(g.shape[0], -1)
        d2 = self.dense.reshape(self.dense.shape[0], -1)
        dvals = np.einsum("ij,ij->i", g2[self.rows], d2[self.cols])
        ddense = np.asarray(self.A.T @ g2).reshape(self.dense.shape)
        return dvals, ddense


def spmm(A: SparseRowMatrix, dense) -> Tensor:
    vals = A.values if isinstance(A.values, Tensor) else Tensor(A.value_array())
    return SpMM.apply(vals, F.as_tensor(dense, dtype=vals.dtype), rows=A.row_indices(), cols=A.col_indices,
                      offsets=A.row_offsets, shape=(A.num_rows, A.num_cols))


def stack_powers(A: SparseRowMatrix, k: int) -> VirtualEdges:
    """Stack ``[I | A | A^2 | ... | A^k]`` along a trailing channel axis.

    Each power is one sparse-by-dense product with the previous power.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = A.num_rows
    dtype = A.values.dtype if isinstance(A.values, Tensor) else np.float64
    P = Tensor(np.eye(n, dtype=dtype))
    slices = [P]
    for _ in range(k):
        P = spmm(A, P)
        slices.append(P)
    return VirtualEdges(F.stack(slices, axis=-1), k=k, mixed=False)


def stack_powers_dense(A, k: int) -> Tensor:
    """Batched stacked powers of dense ``[..., n, n]`` matrices -> ``[..., n, n, k+1]``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    A = F.as_tensor(A)
    n = A.shape[-1]
    eye = np.broadcast_to(np.eye(n, dtype=A.dtype), A.shape).copy()
    P = Tensor(eye)
    slices = [P]
    for _ in range(k):
        P = A @ P
        slices.append(P)
    return F.stack(slices, axis=-1)


def raw_walk_stack(A: SparseRowMatrix, k: int) -> np.ndarray:
    """Plain-array stacked powers of a fixed adjacency (no tape)."""
    M = A.to_scipy()
    n = A.num_rows
    out = np.empty((n, n, k + 1))
    P = np.eye(n)
    out[..., 0] = P
    for t in range(1, k + 1):
        P = M @ P
        out[..., t] = P
    return out


# -- edge-wise FFN and self-edge encoding --------------------------------

def edge_ffn(E, params: EdgeFfnParams, training: bool = False, mask=None) -> VirtualEdges:
    """Input batch norm, then residual ``E + ReLU(BN(E W1)) W2`` layers, slot-wise.

    ``mask`` (shape ``E.shape[:-1]``) restricts batch statistics to real
    intra-graph slots, optionally weighted by multiplicity; slots with zero
    weight come out as zero.
    """
    if isinstance(E, VirtualEdges):
        if E.mixed:
            raise ValueError("edge_ffn expects an unmixed virtual-edge stack")
        k, X = E.k, E.E
    else:
        X = F.as_tensor(E)
        k = X.shape[-1] - 1
    c = X.shape[-1]
    if params.in_gamma.shape[0] != c:
        raise ShapeError(f"edge FFN built for {params.in_gamma.shape[0]} channels, got {c}")
    h = F.batch_norm(X, params.in_gamma, params.in_beta, params.in_bn, training, mask=mask)
    for layer in params.layers:
        z = F.linear(h, layer.w1, layer.b1)
        z = F.relu(F.batch_norm(z, layer.bn_gamma, layer.bn_beta, layer.bn, training, mask=mask))
        h = F.linear(z, layer.w2, layer.b2) + h
    if mask is not None:
        h = h * Tensor((np.asarray(mask) > 0).astype(h.dtype)[..., None])
    return VirtualEdges(h, k=k, mixed=True)


def diagonal(E) -> Tensor:
    """Self-edges ``E[..., i, i, :]`` as ``[..., n, C]``."""
    E = E.E if isinstance(E, VirtualEdges) else F.as_tensor(E)
    n = E.shape[-2]
    ar = np.arange(n)
    if E.ndim == 3:
        return E[ar, ar]
    return E[:, ar, ar]


def self_edge_encoding(E, pe: PeParams) -> Tensor:
    """ReLU(E_ii W_pe) per node; the caller adds it to the node embeddings."""
    return F.relu(diagonal(E) @ pe.w_pe)
