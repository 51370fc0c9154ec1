"""Graph containers, compressed-row adjacency and block-diagonal batching."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised when a graph or adjacency violates its structural invariants."""


@dataclass(frozen=True)
class SparseRowMatrix:
    """Compressed sparse row matrix.

    ``values`` is normally a float array; :func:`gdiffuser.virtual_edges.weighted_adjacency`
    returns one whose values are a differentiable tensor over the same pattern.
    """

    num_rows: int
    num_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: object

    @property
    def nnz(self) -> int:
        return int(self.col_indices.shape[0])

    def row_indices(self) -> np.ndarray:
        """Row id of every stored entry, aligned with ``col_indices``."""
        return np.repeat(np.arange(self.num_rows), np.diff(self.row_offsets))

    def value_array(self) -> np.ndarray:
        v = self.values
        return np.asarray(getattr(v, "data", v), dtype=np.float64)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_rows, self.num_cols))
        out[self.row_indices(), self.col_indices] = self.value_array()
        return out

    def to_scipy(self):
        import scipy.sparse as sp

        return sp.csr_matrix(
            (self.value_array(), self.col_indices, self.row_offsets),
            shape=(self.num_rows, self.num_cols),
        )

    def transpose(self) -> "SparseRowMatrix":
        rows = self.row_indices()
        return _from_coo(self.col_indices, rows, self.value_array(), self.num_cols, self.num_rows)

    def with_values(self, values) -> "SparseRowMatrix":
        return SparseRowMatrix(self.num_rows, self.num_cols, self.row_offsets, self.col_indices, values)


def _from_coo(rows, cols, vals, num_rows, num_cols) -> SparseRowMatrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    keep = vals != 0.0
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    offsets = np.zeros(num_rows + 1, dtype=np.int64)
    np.add.at(offsets, rows + 1, 1)
    return SparseRowMatrix(num_rows, num_cols, np.cumsum(offsets), cols, vals)


def build_csr(edge_list, num_nodes: int, symmetric: bool = True) -> SparseRowMatrix:
    """Binary adjacency from an edge list; duplicates collapse to a single 1.0."""
    if num_nodes < 1:
        raise GraphError(f"num_nodes must be >= 1, got {num_nodes}")
    edges = np.asarray(list(edge_list), dtype=np.int64).reshape(-1, 2)
    bad = (edges < 0) | (edges >= num_nodes)
    if bad.any():
        src, dst = edges[np.flatnonzero(bad.any(axis=1))[0]]
        raise GraphError(f"edge ({src}, {dst}) out of range for {num_nodes} nodes")
    if symmetric:
        edges = np.concatenate([edges, edges[:, ::-1]], axis=0)
    if edges.shape[0]:
        edges = np.unique(edges, axis=0)
    return _from_coo(edges[:, 0], edges[:, 1], np.ones(edges.shape[0]), num_nodes, num_nodes)


def row_normalize(A: SparseRowMatrix) -> SparseRowMatrix:
    """L1-normalize each row. Rows summing to zero stay zero."""
    vals = A.value_array()
    if (vals < 0).any():
        raise GraphError("row_normalize requires nonnegative values")
    rows = A.row_indices()
    sums = np.bincount(rows, weights=vals, minlength=A.num_rows)[rows]
    out = np.divide(vals, sums, out=np.zeros_like(vals, dtype=np.float64), where=sums > 0)
    return A.with_values(out)


@dataclass(frozen=True, eq=False)
class Graph:
    """A graph with node features, directed edge list and optional labels.

    Undirected graphs list each edge once; :meth:`adjacency` mirrors them.
    """

    num_nodes: int
    node_features: np.ndarray
    edge_list: np.ndarray
    edge_features: np.ndarray | None = None
    labels: np.ndarray | None = None
    attributes: dict = field(default_factory=dict)
    directed: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        x = np.asarray(self.node_features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(self.num_nodes, -1)
        edges = np.asarray(self.edge_list, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "node_features", x)
        object.__setattr__(self, "edge_list", edges)
        if x.shape[0] != self.num_nodes:
            raise GraphError(f"node_features has {x.shape[0]} rows, expected {self.num_nodes}")
        if edges.size and (edges.min() < 0 or edges.max() >= self.num_nodes):
            raise GraphError("edge index out of range")
        if len({tuple(e) for e in edges.tolist()}) != edges.shape[0]:
            raise GraphError("edge_list contains duplicate pairs")
        if self.edge_features is not None:
            ef = np.asarray(self.edge_features, dtype=np.float64).reshape(edges.shape[0], -1)
            object.__setattr__(self, "edge_features", ef)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != self.num_nodes:
                raise GraphError("labels length must equal num_nodes")
            object.__setattr__(self, "labels", lab)

    @property
    def num_features(self) -> int:
        return self.node_features.shape[1]

    @property
    def num_edge_features(self) -> int:
        return 0 if self.edge_features is None else self.edge_features.shape[1]

    def adjacency(self) -> SparseRowMatrix:
        if "adj" not in self._cache:
            self._cache["adj"] = build_csr(self.edge_list, self.num_nodes, symmetric=not self.directed)
        return self._cache["adj"]

    def stored_edge_features(self) -> np.ndarray | None:
        """Edge features aligned with the stored entries of :meth:`adjacency`.

        Mirrored copies of an undirected edge share its feature row.
        """
        if self.edge_features is None:
            return None
        if "adj_ef" not in self._cache:
            A = self.adjacency()
            lookup = {}
            for (s, d), row in zip(self.edge_list.tolist(), self.edge_features):
                lookup[(s, d)] = row
                if not self.directed:
                    lookup.setdefault((d, s), row)
            rows = A.row_indices()
            self._cache["adj_ef"] = np.stack(
                [lookup[(int(i), int(j))] for i, j in zip(rows, A.col_indices)]
            ) if A.nnz else np.zeros((0, self.num_edge_features))
        return self._cache["adj_ef"]

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that new node ``perm[i]`` is old node ``i``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return Graph(
            num_nodes=self.num_nodes,
            node_features=self.node_features[inv],
            edge_list=perm[self.edge_list] if self.edge_list.size else self.edge_list,
            edge_features=self.edge_features,
            labels=None if self.labels is None else self.labels[inv],
            attributes=dict(self.attributes),
            directed=self.directed,
        )


@dataclass(frozen=True, eq=False)
class BatchedGraph:
    """Several graphs composed into one block-diagonal graph."""

    graphs: tuple
    node_offsets: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.node_offsets[-1])

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.node_offsets)

    @property
    def node_features(self) -> np.ndarray:
        return np.concatenate([g.node_features for g in self.graphs], axis=0)

    @property
    def graph_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.graphs)), self.sizes)

    @property
    def block_mask(self) -> np.ndarray:
        gid = self.graph_index
        return gid[:, None] == gid[None, :]

    def adjacency(self) -> SparseRowMatrix:
        rows, cols, vals = [], [], []
        for off, g in zip(self.node_offsets[:-1], self.graphs):
            A = g.adjacency()
            rows.append(A.row_indices() + off)
            cols.append(A.col_indices + off)
            vals.append(A.value_array())
        return _from_coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                         self.num_nodes, self.num_nodes)

    def labels(self) -> np.ndarray:
        if any(g.labels is None for g in self.graphs):
            raise GraphError("every member graph needs labels")
        return np.concatenate([g.labels for g in self.graphs])


def block_diagonal_batch(graphs: Iterable[Graph]) -> BatchedGraph:
    graphs = tuple(graphs)
    if not graphs:
        raise GraphError("cannot batch an empty list of graphs")
    d_in = graphs[0].num_features
    d_edge = graphs[0].num_edge_features
    for g in graphs[1:]:
        if g.num_features != d_in:
            raise GraphError(f"node feature dim mismatch: {g.num_features} != {d_in}")
        if g.num_edge_features != d_edge:
            raise GraphError(f"edge feature dim mismatch: {g.num_edge_features} != {d_edge}")
    offsets = np.concatenate([[0], np.cumsum([g.num_nodes for g in graphs])]).astype(np.int64)
    return BatchedGraph(graphs, offsets)


# -- JSONL dataset format ---------------------------------------------------

def graph_to_record(g: Graph) -> dict:
    rec = {
        "num_nodes": int(g.num_nodes),
        "edges": g.edge_list.tolist(),
        "node_features": [[_num(v) for v in row] for row in g.node_features.tolist()],
    }
    if g.edge_features is not None:
        rec["edge_features"] = [[_num(v) for v in row] for row in g.edge_features.tolist()]
    if g.labels is not None:
        rec["labels"] = g.labels.tolist()
    if g.attributes:
        rec["attrs"] = dict(g.attributes)
    return rec


def _num(v: float):
    return int(v) if float(v).is_integer() else v


def graph_from_record(rec: dict) -> Graph:
    n = int(rec["num_nodes"])
    return Graph(
        num_nodes=n,
        node_features=np.asarray(rec["node_features"], dtype=np.float64).reshape(n, -1),
        edge_list=np.asarray(rec.get("edges", []), dtype=np.int64).reshape(-1, 2),
        edge_features=rec.get("edge_features"),
        labels=rec.get("labels"),
        attributes=dict(rec.get("attrs", {})),
    )


def write_jsonl(path, graphs: Iterable[Graph]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g), separators=(",", ":")))
            fh.write("\n")


def iter_jsonl(path) -> Iterator[Graph]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield graph_from_record(json.loads(line))


def read_jsonl(path) -> list[Graph]:
    return list(iter_jsonl(Path(path)))
