"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np

from .graph import BatchedGraph, Graph, GraphError, graph_from_record


def check_graph(g, n_features: int | None = None, require_labels: bool = False) -> Graph:
    """Coerce a :class:`Graph` or a JSONL-style record into a validated Graph."""
    if isinstance(g, dict):
        g = graph_from_record(g)
    if not isinstance(g, Graph):
        raise TypeError(f"expected a Graph or a graph record, got {type(g).__name__}")
    if n_features is not None and g.num_features != n_features:
        raise GraphError(f"graph has {g.num_features} node features, expected {n_features}")
    if require_labels and g.labels is None:
        raise GraphError("graph has no node labels")
    if not np.isfinite(g.node_features).all():
        raise GraphError("node features contain NaN or inf")
    return g


def check_graphs(X, n_features: int | None = None, require_labels: bool = False) -> list:
    if isinstance(X, BatchedGraph):
        X = list(X.graphs)
    elif isinstance(X, (Graph, dict)):
        X = [X]
    graphs = [check_graph(g, n_features, require_labels) for g in X]
    if not graphs:
        raise ValueError("need at least one graph")
    d = graphs[0].num_features
    if any(g.num_features != d for g in graphs):
        raise GraphError("graphs disagree on node feature dimension")
    return graphs


def attach_labels(graphs, y) -> list:
    """Copy ``graphs`` with per-node labels from ``y`` (one 1-d array per graph)."""
    if len(y) != len(graphs):
        raise ValueError(f"got {len(y)} label arrays for {len(graphs)} graphs")
    out = []
    for g, lab in zip(graphs, y):
        lab = np.asarray(lab).reshape(-1)
        if lab.shape[0] != g.num_nodes:
            raise ValueError(f"label array of length {lab.shape[0]} for a {g.num_nodes}-node graph")
        out.append(Graph(g.num_nodes, g.node_features, g.edge_list, g.edge_features, lab,
                         dict(g.attributes), g.directed))
    return out
