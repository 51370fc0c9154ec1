"""scikit-learn compatible wrappers.

``DiffuserNodeClassifier`` treats a list of graphs as ``X`` and one label
array per graph as ``y``; predictions come back in the same per-graph
layout. ``RandomWalkEncoder`` exposes the stacked walk probabilities as a
stateless transformer.
"""
from __future__ import annotations

from types import SimpleNamespace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autograd.tensor import no_grad
from .graph import Graph, row_normalize
from .model import DiffuserConfig
from .train import TrainConfig, train
from .validation import attach_labels, check_graphs
from .virtual_edges import raw_walk_stack


class DiffuserNodeClassifier(ClassifierMixin, BaseEstimator):
    """Per-node classifier over graphs using virtual-edge attention.

    Parameters mirror :class:`~gdiffuser.model.DiffuserConfig` and
    :class:`~gdiffuser.train.TrainConfig`. ``mode="vanilla"`` trains the plain
    transformer baseline instead. When no validation graphs are passed to
    :meth:`fit`, ``validation_fraction`` of the training graphs is held out
    for checkpoint selection (0 selects on the training graphs).
    """

    def __init__(self, hidden_dim=32, num_layers=3, heads=4, k=16, dropout=0.0, attention_dropout=0.0,
                 use_weighted_adjacency=False, mode="diffuser", num_classes=None, epochs=200,
                 batch_size=16, lr=4e-4, warmup_epochs=5, weight_decay=1e-5, early_stop_patience=50,
                 validation_fraction=0.1, dtype="float64", random_state=0):
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.heads = heads
        self.k = k
        self.dropout = dropout
        self.attention_dropout = attention_dropout
        self.use_weighted_adjacency = use_weighted_adjacency
        self.mode = mode
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.early_stop_patience = early_stop_patience
        self.validation_fraction = validation_fraction
        self.dtype = dtype
        self.random_state = random_state

    def _labelled(self, X, y):
        graphs = check_graphs(X, require_labels=y is None)
        return graphs if y is None else attach_labels(graphs, y)

    def _train_config(self, in_dim, edge_dim):
        model = DiffuserConfig(
            in_dim=in_dim, num_classes=len(self.classes_), hidden_dim=self.hidden_dim,
            num_layers=self.num_layers, heads=self.heads, k=self.k, dropout=self.dropout,
            attention_dropout=self.attention_dropout, use_weighted_adjacency=self.use_weighted_adjacency,
            edge_dim=edge_dim, dtype=self.dtype,
        )
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.lr,
            warmup_epochs=min(self.warmup_epochs, self.epochs), weight_decay=self.weight_decay,
            seed=int(self.random_state or 0), early_stop_patience=self.early_stop_patience,
            baseline_mode="vanilla_transformer" if self.mode == "vanilla" else "diffuser", model=model,
        )

    def _encode(self, graphs):
        out = []
        for g in graphs:
            idx = np.searchsorted(self.classes_, g.labels)
            if (idx >= len(self.classes_)).any() or (self.classes_[np.minimum(idx, len(self.classes_) - 1)] != g.labels).any():
                raise ValueError("labels contain classes not seen during fit")
            out.append(Graph(g.num_nodes, g.node_features, g.edge_list, g.edge_features, idx,
                             dict(g.attributes), g.directed))
        return out

    def fit(self, X, y=None, X_val=None, y_val=None):
        graphs = self._labelled(X, y)
        all_labels = np.concatenate([g.labels for g in graphs])
        if self.num_classes is not None:
            self.classes_ = np.arange(self.num_classes)
        else:
            self.classes_ = np.unique(all_labels)
        graphs = self._encode(graphs)
        if X_val is not None:
            val = self._encode(self._labelled(X_val, y_val))
            fit_graphs = graphs
        elif self.validation_fraction and len(graphs) > 1:
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(len(graphs))
            n_val = max(1, int(round(self.validation_fraction * len(graphs))))
            val = [graphs[i] for i in order[:n_val]]
            fit_graphs = [graphs[i] for i in order[n_val:]]
        else:
            val = fit_graphs = graphs
        self.n_features_in_ = graphs[0].num_features
        cfg = self._train_config(self.n_features_in_, graphs[0].num_edge_features)
        report, model = train(cfg, SimpleNamespace(train=fit_graphs, val=val, test=val))
        if model is None:
            raise ValueError("epochs=0: nothing to fit")
        self.model_ = model
        self.report_ = report
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        single = isinstance(X, (Graph, dict))
        graphs = check_graphs(X, n_features=self.n_features_in_)
        outs = []
        with no_grad():
            for s in range(0, len(graphs), 64):
                chunk = graphs[s:s + 64]
                logits = self.model_.forward(chunk, training=False).data
                cuts = np.cumsum([g.num_nodes for g in chunk])[:-1]
                outs.extend(np.split(logits, cuts))
        return outs, single

    def predict_proba(self, X):
        outs, single = self._logits(X)
        probs = []
        for z in outs:
            e = np.exp(z - z.max(axis=1, keepdims=True))
            probs.append(e / e.sum(axis=1, keepdims=True))
        return probs[0] if single else probs

    def predict(self, X):
        outs, single = self._logits(X)
        preds = [self.classes_[z.argmax(axis=1)] for z in outs]
        return preds[0] if single else preds

    def score(self, X, y=None, sample_weight=None):
        """Node accuracy over all graphs."""
        graphs = self._labelled(X, y)
        preds = self.predict(graphs)
        if isinstance(preds, np.ndarray):
            preds = [preds]
        truth = np.concatenate([g.labels for g in graphs])
        return float((np.concatenate(preds) == truth).mean())


class RandomWalkEncoder(TransformerMixin, BaseEstimator):
    """Landing probabilities of random walks of length 0..k.

    ``output="self"`` gives the per-node return probabilities ``[n, k+1]``;
    ``output="full"`` gives the whole stack ``[n, n, k+1]``.
    """

    def __init__(self, k=16, output="self"):
        self.k = k
        self.output = output

    def fit(self, X, y=None):
        if self.output not in ("self", "full"):
            raise ValueError(f"output must be 'self' or 'full', got {self.output!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        check_graphs(X)
        self.n_channels_ = self.k + 1
        return self

    def transform(self, X):
        check_is_fitted(self, "n_channels_")
        single = isinstance(X, (Graph, dict))
        out = []
        for g in check_graphs(X):
            E = raw_walk_stack(row_normalize(g.adjacency()), self.k)
            if self.output == "self":
                E = E[np.arange(g.num_nodes), np.arange(g.num_nodes)]
            out.append(E)
        return out[0] if single else out
