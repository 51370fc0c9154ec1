"""Transformer stack with fused positional/content attention over virtual edges."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import functional as F
from .autograd.params import ModelParams, init_params
from .autograd.tensor import BatchNormState, ShapeError, Tensor
from .graph import BatchedGraph, Graph, block_diagonal_batch, row_normalize
from .virtual_edges import (
    EdgeFfnParams, PeParams, WeightedAdjParams, edge_ffn, edge_ffn_spec, raw_walk_stack,
    self_edge_encoding, stack_powers_dense, weighted_adjacency_dense, weighted_adjacency_spec,
)

MODES = ("diffuser", "vanilla")


@dataclass
class DiffuserConfig:
    in_dim: int = 8
    num_classes: int = 2
    hidden_dim: int = 32
    num_layers: int = 3
    heads: int = 4
    k: int = 16
    dropout: float = 0.0
    attention_dropout: float = 0.0
    use_weighted_adjacency: bool = False
    edge_dim: int = 0
    ffn_multiplier: int = 2
    ffn_hidden: int = 0           # 0 -> ffn_multiplier * hidden_dim
    edge_ffn_layers: int = 2
    edge_ffn_hidden: int = 0      # 0 -> 2 * (k + 1)
    norm: str = "batch"
    share_positional: bool = False
    mode: str = "diffuser"
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("in_dim", "num_classes", "hidden_dim", "num_layers", "heads", "k", "ffn_multiplier"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        for name in ("dropout", "attention_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.norm not in ("batch", "layer"):
            raise ValueError(f"norm must be 'batch' or 'layer', got {self.norm!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be 'float64' or 'float32', got {self.dtype!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def ffn_width(self) -> int:
        return self.ffn_hidden or self.ffn_multiplier * self.hidden_dim

    def replace(self, **changes) -> "DiffuserConfig":
        return dataclasses.replace(self, **changes)


def parameter_spec(cfg: DiffuserConfig):
    """``(name, shape, role)`` list for every learnable tensor of ``cfg``."""
    d, c = cfg.hidden_dim, cfg.k + 1
    diffuser = cfg.mode == "diffuser"
    spec = [("embed.weight", (cfg.in_dim, d), "linear_weight"), ("embed.bias", (d,), "bias")]
    if diffuser:
        spec.append(("pe.weight", (c, d), "linear_weight"))
        if cfg.use_weighted_adjacency:
            spec += weighted_adjacency_spec(d, cfg.edge_dim)
        spec += edge_ffn_spec(cfg.k, cfg.edge_ffn_hidden or None, cfg.edge_ffn_layers)
        if cfg.share_positional:
            spec.append(("attn_wp", (c, cfg.heads), "linear_weight"))
    for l in range(cfg.num_layers):
        p = f"layers.{l}"
        spec += [
            (f"{p}.attn.wq", (d, d), "linear_weight"),
            (f"{p}.attn.wk", (d, d), "linear_weight"),
            (f"{p}.attn.wv", (d, d), "linear_weight"),
            (f"{p}.attn.wo", (d, d), "linear_weight"),
            (f"{p}.attn.bo", (d,), "bias"),
        ]
        if diffuser and not cfg.share_positional:
            spec.append((f"{p}.attn.wp", (c, cfg.heads), "linear_weight"))
        spec += [
            (f"{p}.norm1.gamma", (d,), "bn_gamma"),
            (f"{p}.norm1.beta", (d,), "bn_beta"),
            (f"{p}.ffn.w1", (d, cfg.ffn_width), "linear_weight"),
            (f"{p}.ffn.b1", (cfg.ffn_width,), "bias"),
            (f"{p}.ffn.w2", (cfg.ffn_width, d), "linear_weight"),
            (f"{p}.ffn.b2", (d,), "bias"),
            (f"{p}.norm2.gamma", (d,), "bn_gamma"),
            (f"{p}.norm2.beta", (d,), "bn_beta"),
        ]
    spec += [("head.weight", (d, cfg.num_classes), "linear_weight"), ("head.bias", (cfg.num_classes,), "bias")]
    return spec


def count_parameters(cfg: DiffuserConfig) -> int:
    return int(sum(np.prod(shape) for _, shape, _ in parameter_spec(cfg)))


@dataclass
class AttentionLayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    wp: Tensor | None
    heads: int
    dropout: float = 0.0


@dataclass
class LayerParams:
    attention: AttentionLayerParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    norm1: tuple
    norm2: tuple
    dropout: float = 0.0
    norm_type: str = "batch"


# -- attention ---------------------------------------------------------------

def positional_attention(E, w_p) -> Tensor:
    """Per-head logits ``E_ij . w_p[:, h]`` as ``[..., heads, n, n]``."""
    E = E.E if hasattr(E, "E") else F.as_tensor(E)
    logits = E @ F.as_tensor(w_p)
    nd = logits.ndim
    return logits.transpose(tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    B, n, d = t.shape
    return t.reshape(B, n, heads, d // heads).transpose(0, 2, 1, 3)


def _row_shift(content: np.ndarray) -> np.ndarray:
    m = content.max(axis=-1, keepdims=True)
    return np.where(np.isfinite(m), m, 0.0)


def fused_attention(x, E, layer: AttentionLayerParams, block_mask, training: bool = False, rng=None,
                    return_attention: bool = False, E_index=None):
    """Sigmoid-gated softmax attention.

    ``att = L1-normalise(exp(QK^T/sqrt(d_h) - rowmax) * sigmoid(E W_p) * mask)`` per
    head, then ``concat_h(att V) W_o + b_o``. ``x`` is ``[n, d]`` (with ``E``
    ``[n, n, C]`` and mask ``[n, n]``) or carries a leading batch axis. With
    ``E=None`` or ``layer.wp=None`` the gate is dropped, giving plain softmax.
    ``E_index`` maps each batch entry to a row of a deduplicated ``E``.
    """
    x = F.as_tensor(x)
    E = E.E if hasattr(E, "E") else E
    squeeze = x.ndim == 2
    mask = np.asarray(block_mask, dtype=bool)
    if squeeze:
        x = x.reshape(1, *x.shape)
        mask = mask[None]
        if E is not None:
            E = F.as_tensor(E).reshape(1, *E.shape)
    B, n, d = x.shape
    if mask.shape != (B, n, n):
        raise ShapeError(f"attention mask shape {mask.shape} does not cover {(B, n, n)}")
    h = layer.heads
    dh = d // h
    q = _split_heads(x @ layer.wq, h)
    k = _split_heads(x @ layer.wk, h)
    v = _split_heads(x @ layer.wv, h)
    content = (q @ k.transpose()) * (1.0 / math.sqrt(dh))
    hm = mask[:, None, :, :]
    content = F.masked_fill(content, hm, -np.inf)
    scores = F.exp(content - Tensor(_row_shift(content.data)))
    if E is not None and layer.wp is not None:
        gate = F.sigmoid(positional_attention(E, layer.wp))
        if E_index is not None:
            gate = gate[E_index]
        scores = scores * gate
    att = F.l1_row_normalize(scores)
    att_used = F.dropout(att, layer.dropout, training, rng)
    out = (att_used @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
    out = out @ layer.wo + layer.bo
    if squeeze:
        out = out.reshape(n, d)
        att_data = att.data[0]
    else:
        att_data = att.data
    return (out, att_data) if return_attention else out


def _norm(x, norm, norm_type, training, node_mask):
    gamma, beta, state = norm
    if norm_type == "batch":
        return F.batch_norm(x, gamma, beta, state, training, mask=node_mask)
    y = F.layer_norm(x, gamma, beta)
    return y if node_mask is None else y * Tensor(np.asarray(node_mask, dtype=y.dtype)[..., None])


def diffuser_layer(x, E, layer: LayerParams, block_mask, training: bool = False, rng=None,
                   node_mask=None, return_attention: bool = False, E_index=None):
    """Post-residual-norm transformer layer around :func:`fused_attention`."""
    a, att = fused_attention(x, E, layer.attention, block_mask, training, rng, return_attention=True,
                             E_index=E_index)
    x = _norm(x + F.dropout(a, layer.dropout, training, rng), layer.norm1, layer.norm_type, training, node_mask)
    f = F.linear(F.relu(F.linear(x, layer.w1, layer.b1)), layer.w2, layer.b2)
    x = _norm(x + F.dropout(f, layer.dropout, training, rng), layer.norm2, layer.norm_type, training, node_mask)
    return (x, att) if return_attention else x


# -- batching ----------------------------------------------------------------

@dataclass
class PaddedBatch:
    """Graphs of a batch laid out as ``[B, n_max, ...]`` with validity masks.

    Equivalent to the block-diagonal layout with cross-graph pairs masked:
    only the diagonal blocks are stored. Graphs sharing one structure (same
    node count and edge list) share one slot in ``raw_E``; ``structure_index``
    maps each graph to it and ``structure_weight`` holds the per-slot
    multiplicity used for batch statistics.
    """

    X: np.ndarray
    node_mask: np.ndarray
    pair_mask: np.ndarray
    flat_index: tuple
    edge_index: tuple
    edge_features: np.ndarray | None
    raw_E: np.ndarray | None
    structure_index: np.ndarray
    structure_weight: np.ndarray
    labels: np.ndarray | None


def walk_stack(g: Graph, k: int) -> np.ndarray:
    """Cached stacked powers of the row-normalised adjacency of ``g``."""
    key = ("walk", k)
    if key not in g._cache:
        g._cache[key] = raw_walk_stack(row_normalize(g.adjacency()), k)
    return g._cache[key]


def structure_key(g: Graph):
    if "skey" not in g._cache:
        g._cache["skey"] = (g.num_nodes, g.directed, g.edge_list.tobytes())
    return g._cache["skey"]


def pad_batch(batch: BatchedGraph, k: int | None = None, dtype=np.float64, share_structure: bool = True) -> PaddedBatch:
    graphs = batch.graphs
    B = len(graphs)
    n = int(batch.sizes.max())
    X = np.zeros((B, n, graphs[0].num_features), dtype=dtype)
    node_mask = np.zeros((B, n), dtype=bool)
    eb, ei, ej, ef = [], [], [], []
    for b, g in enumerate(graphs):
        m = g.num_nodes
        X[b, :m] = g.node_features
        node_mask[b, :m] = True
        A = g.adjacency()
        eb.append(np.full(A.nnz, b))
        ei.append(A.row_indices())
        ej.append(A.col_indices)
        if g.edge_features is not None:
            ef.append(g.stored_edge_features())
    pair_mask = node_mask[:, :, None] & node_mask[:, None, :]

    if share_structure:
        keys, index, reps = {}, np.empty(B, dtype=np.int64), []
        for b, g in enumerate(graphs):
            key = structure_key(g)
            if key not in keys:
                keys[key] = len(reps)
                reps.append(b)
            index[b] = keys[key]
        reps = np.asarray(reps)
    else:
        index = reps = np.arange(B)
    counts = np.bincount(index, minlength=len(reps)).astype(dtype)
    weight = pair_mask[reps].astype(dtype) * counts[:, None, None]
    raw_E = None
    if k is not None:
        raw_E = np.zeros((len(reps), n, n, k + 1), dtype=dtype)
        for u, b in enumerate(reps):
            m = graphs[b].num_nodes
            raw_E[u, :m, :m] = walk_stack(graphs[b], k)
    labels = None
    if all(g.labels is not None for g in graphs):
        labels = np.concatenate([g.labels for g in graphs])
    return PaddedBatch(
        X=X, node_mask=node_mask, pair_mask=pair_mask, flat_index=np.nonzero(node_mask),
        edge_index=(np.concatenate(eb), np.concatenate(ei), np.concatenate(ej)),
        edge_features=np.concatenate(ef) if ef else None, raw_E=raw_E,
        structure_index=index, structure_weight=weight, labels=labels,
    )


# -- model -------------------------------------------------------------------

@dataclass
class ForwardTrace:
    logits: Tensor
    virtual_edges_raw: object = None
    virtual_edges: object = None
    positional_encoding: object = None
    attention: list = field(default_factory=list)


class DiffuserModel:
    """Embedding, self-edge positional encoding, attention layers and node head."""

    def __init__(self, config: DiffuserConfig, seed: int = 0, params: ModelParams | None = None):
        config.validate()
        self.config = config
        self.seed = seed
        self.params = params if params is not None else self._init(seed)
        self.rng = np.random.default_rng(seed)

    def _init(self, seed):
        cfg = self.config
        dt = np.dtype(cfg.dtype)
        params = init_params(parameter_spec(cfg), seed, dtype=dt)
        d, c = cfg.hidden_dim, cfg.k + 1
        if cfg.mode == "diffuser":
            if cfg.use_weighted_adjacency:
                params.add_norm("wadj.bn", 2 * d, dtype=dt)
            params.add_norm("effn.bn_in", c, dtype=dt)
            for i in range(cfg.edge_ffn_layers):
                params.add_norm(f"effn.layers.{i}.bn", cfg.edge_ffn_hidden or 2 * c, dtype=dt)
        if cfg.norm == "batch":
            for l in range(cfg.num_layers):
                params.add_norm(f"layers.{l}.norm1", d, dtype=dt)
                params.add_norm(f"layers.{l}.norm2", d, dtype=dt)
        return params

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def reseed_dropout(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    @property
    def is_diffuser(self) -> bool:
        return self.config.mode == "diffuser"

    def layer(self, l: int) -> LayerParams:
        cfg, p = self.config, self.params
        q = f"layers.{l}"
        wp = None
        if self.is_diffuser:
            wp = p["attn_wp"] if cfg.share_positional else p[f"{q}.attn.wp"]
        attn = AttentionLayerParams(
            p[f"{q}.attn.wq"], p[f"{q}.attn.wk"], p[f"{q}.attn.wv"], p[f"{q}.attn.wo"], p[f"{q}.attn.bo"],
            wp, cfg.heads, cfg.attention_dropout,
        )
        norms = []
        for s in ("norm1", "norm2"):
            state = p.norms.get(f"{q}.{s}") or BatchNormState(cfg.hidden_dim, dtype=self.dtype)
            norms.append((p[f"{q}.{s}.gamma"], p[f"{q}.{s}.beta"], state))
        return LayerParams(attn, p[f"{q}.ffn.w1"], p[f"{q}.ffn.b1"], p[f"{q}.ffn.w2"], p[f"{q}.ffn.b2"],
                           norms[0], norms[1], cfg.dropout, cfg.norm)

    def prepare(self, graphs) -> PaddedBatch:
        if isinstance(graphs, PaddedBatch):
            return graphs
        if isinstance(graphs, Graph):
            graphs = [graphs]
        batch = graphs if isinstance(graphs, BatchedGraph) else block_diagonal_batch(graphs)
        if batch.graphs[0].num_features != self.config.in_dim:
            raise ShapeError(f"graphs have {batch.graphs[0].num_features} features, model expects {self.config.in_dim}")
        need_raw = self.is_diffuser and not self.config.use_weighted_adjacency
        return pad_batch(batch, self.config.k if need_raw else None, dtype=self.dtype, share_structure=need_raw)

    def trace(self, graphs, training: bool = False, keep: bool = False) -> ForwardTrace:
        cfg, p = self.config, self.params
        pb = self.prepare(graphs)
        dt = self.dtype
        nm = pb.node_mask
        nm_t = Tensor(nm.astype(dt)[..., None])
        x = F.linear(Tensor(pb.X, dtype=dt), p["embed.weight"], p["embed.bias"]) * nm_t
        out = ForwardTrace(logits=None)
        E = None
        E_index = pb.structure_index
        if self.is_diffuser:
            if cfg.use_weighted_adjacency:
                A = weighted_adjacency_dense(x, pb.edge_index, pb.edge_features,
                                             WeightedAdjParams.from_params(p), training)
                E_raw = stack_powers_dense(A, cfg.k) * Tensor(pb.pair_mask.astype(dt)[..., None])
            else:
                E_raw = Tensor(pb.raw_E, dtype=dt)
            E = edge_ffn(E_raw, EdgeFfnParams.from_params(p, num_layers=cfg.edge_ffn_layers), training,
                         mask=pb.structure_weight).E
            pe = self_edge_encoding(E, PeParams(p["pe.weight"]))[E_index] * nm_t
            x = x + pe
            if keep:
                out.virtual_edges_raw = E_raw.data[E_index]
                out.virtual_edges = E.data[E_index]
                out.positional_encoding = pe.data
        for l in range(cfg.num_layers):
            x, att = diffuser_layer(x, E, self.layer(l), pb.pair_mask, training, self.rng,
                                    node_mask=nm, return_attention=True, E_index=E_index)
            if keep:
                out.attention.append(att)
        logits = F.linear(x, p["head.weight"], p["head.bias"])
        out.logits = logits[pb.flat_index]
        return out

    def forward(self, graphs, training: bool = False) -> Tensor:
        """Node logits ``[N, num_classes]`` in batch node order."""
        return self.trace(graphs, training).logits

    __call__ = forward


def forward(model: DiffuserModel, batch, training: bool = False) -> Tensor:
    return model.forward(batch, training)


def vanilla_transformer_baseline(config: DiffuserConfig, seed: int = 0, match_budget: bool = True) -> DiffuserModel:
    """Same stack with no virtual edges, positional attention or encoding.

    With ``match_budget`` the FFN is widened until the parameter count is
    as close as possible to the diffuser configuration's.
    """
    base = config.replace(mode="vanilla", use_weighted_adjacency=False)
    if match_budget:
        target = count_parameters(config.replace(mode="diffuser"))
        d, L = config.hidden_dim, config.num_layers
        fixed = count_parameters(base.replace(ffn_hidden=1)) - L * (2 * d + 1)
        width = max(1, round((target - fixed) / (L * (2 * d + 1))))
        base = base.replace(ffn_hidden=width)
    return DiffuserModel(base, seed=seed)
