"""Built-in correctness checks run by ``gdiffuser selftest``.

Each check is deterministic (fixed seeds) and returns ``(passed, detail)``.
"""
from __future__ import annotations

import numpy as np

from . import oracles
from .autograd import functional as F
from .autograd.gradcheck import gradient_errors
from .autograd.tensor import BatchNormState, Tensor, no_grad
from .graph import Graph, row_normalize
from .grid import count_labels
from .model import DiffuserConfig, DiffuserModel, fused_attention
from .virtual_edges import (
    WeightedAdjParams, raw_walk_stack, stack_powers, weighted_adjacency, zero_weighted_adjacency_params,
)

GRAD_TOL = 1e-5
# composite graphs have gradient entries ~1e-6 where difference roundoff alone reaches ~1e-5 relative
COMPOSITE_TOL = 1e-4
CHECKS = []


def check(name):
    def wrap(fn):
        CHECKS.append((name, fn))
        return fn
    return wrap


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _grad(f, params, tol=GRAD_TOL):
    err = max(gradient_errors(f, params, max_coords=None).values())
    return err < tol, f"max rel err {err:.1e}"


def _random_graph(rng, n, p=0.5, features=3):
    """Connected undirected graph: a random spanning tree plus extra edges."""
    order = rng.permutation(n)
    edges = {tuple(sorted((int(order[i]), int(order[rng.integers(0, i)])))) for i in range(1, n)}
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                edges.add((i, j))
    e = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return Graph(n, rng.normal(size=(n, features)), e, labels=rng.integers(0, 3, size=n))


# -- gradient checks on single ops ------------------------------------------

@check("grad.matmul")
def _():
    r = np.random.default_rng(1)
    a, b = _t(r.normal(size=(2, 3, 4))), _t(r.normal(size=(4, 5)))
    return _grad(lambda: ((a @ b) * (a @ b)).sum(), [a, b])


@check("grad.sigmoid")
def _():
    r = np.random.default_rng(2)
    a, w = _t(r.normal(size=(4, 5)) * 3), r.normal(size=(4, 5))
    return _grad(lambda: (F.sigmoid(a) * Tensor(w)).sum(), [a])


@check("grad.exp_log_sqrt")
def _():
    r = np.random.default_rng(3)
    a = _t(r.uniform(0.5, 2.0, size=(3, 4)))
    return _grad(lambda: (F.exp(a) + F.log(a) * F.sqrt(a)).sum(), [a])


@check("grad.relu")
def _():
    r = np.random.default_rng(4)
    x = r.normal(size=(5, 4))
    x[np.abs(x) < 0.1] = 0.5     # stay away from the kink
    a, w = _t(x), r.normal(size=(5, 4))
    return _grad(lambda: (F.relu(a) * Tensor(w)).sum(), [a])


@check("grad.l1_row_normalize")
def _():
    r = np.random.default_rng(5)
    a, w = _t(r.uniform(0.1, 1.0, size=(2, 3, 4))), r.normal(size=(2, 3, 4))
    return _grad(lambda: (F.l1_row_normalize(a) * Tensor(w)).sum(), [a])


@check("grad.batch_norm")
def _():
    r = np.random.default_rng(6)
    x, g, b = _t(r.normal(size=(3, 4, 5))), _t(r.uniform(0.5, 1.5, 5)), _t(r.normal(size=5))
    mask = r.random((3, 4)) < 0.7
    mask[:, 0] = True
    w = r.normal(size=(3, 4, 5))
    errs = []
    for training in (True, False):
        st = BatchNormState(5)
        st.running_var[:] = r.uniform(0.5, 2.0, 5)
        errs.append(max(gradient_errors(
            lambda: (F.batch_norm(x, g, b, st, training, mask=mask) * Tensor(w)).sum(), [x, g, b],
            max_coords=None).values()))
    err = max(errs)
    return err < GRAD_TOL, f"max rel err {err:.1e}"


@check("grad.cross_entropy")
def _():
    r = np.random.default_rng(7)
    z, y = _t(r.normal(size=(6, 4))), r.integers(0, 4, size=6)
    return _grad(lambda: F.cross_entropy(z, y), [z])


@check("grad.indexing")
def _():
    r = np.random.default_rng(8)
    a, b = _t(r.normal(size=(4, 3))), _t(r.normal(size=(4, 2)))
    idx = np.array([0, 2, 2, 3])
    mask = r.random((4, 5)) < 0.3

    def f():
        c = F.concat([a, b], axis=1)
        c = F.masked_fill(c, mask, 0.0)
        return (c[idx] * c[idx]).sum() + F.stack([a[:, 0], b[:, 1]], axis=0).sum()
    return _grad(f, [a, b])


@check("grad.fused_attention")
def _():
    r = np.random.default_rng(9)
    n, d, h, c = 4, 6, 2, 3
    from .model import AttentionLayerParams
    ps = [_t(r.normal(size=(d, d)) * 0.5) for _ in range(4)] + [_t(r.normal(size=d)), _t(r.normal(size=(c, h)))]
    layer = AttentionLayerParams(*ps, heads=h)
    x, E = _t(r.normal(size=(n, d))), _t(r.uniform(size=(n, n, c)))
    mask = np.ones((n, n), dtype=bool)
    mask[0, 3] = mask[3, 0] = False
    w = r.normal(size=(n, d))
    return _grad(lambda: (fused_attention(x, E, layer, mask) * Tensor(w)).sum(), ps + [x, E])


@check("grad.weighted_adjacency_powers")
def _():
    r = np.random.default_rng(10)
    g = _random_graph(r, 5, features=4)
    spec_params = DiffuserModel(DiffuserConfig(in_dim=4, hidden_dim=4, num_layers=1, heads=1, k=3,
                                               use_weighted_adjacency=True), seed=3).params
    wp = WeightedAdjParams.from_params(spec_params)
    x = _t(r.normal(size=(5, 4)))
    w = r.normal(size=(5, 5, 4))
    names = [k for k in spec_params.entries if k.startswith("wadj.")]

    def f():
        A = weighted_adjacency(x, None, g.adjacency(), wp, training=False)
        return (stack_powers(A, 3).E * Tensor(w)).sum()
    return _grad(f, {**{k: spec_params[k] for k in names}, "x": x}, tol=COMPOSITE_TOL)


@check("grad.full_model")
def _():
    r = np.random.default_rng(11)
    g = _random_graph(r, 5)
    cfg = DiffuserConfig(in_dim=3, num_classes=3, hidden_dim=8, num_layers=2, heads=2, k=3)
    m = DiffuserModel(cfg, seed=5)
    return _grad(lambda: F.cross_entropy(m.forward([g]), g.labels), m.params.entries, tol=COMPOSITE_TOL)


# -- oracle equivalence ------------------------------------------------------

@check("oracle.walk_probabilities")
def _():
    r = np.random.default_rng(12)
    worst = 0.0
    for _ in range(20):
        n, k = int(r.integers(1, 7)), int(r.integers(1, 5))
        g = _random_graph(r, n, p=float(r.uniform(0.1, 0.9)))
        E = raw_walk_stack(row_normalize(g.adjacency()), k)
        ref = oracles.walk_probabilities(n, g.edge_list, k)
        worst = max(worst, float(np.abs(E - ref).max()))
    return worst < 1e-10, f"max abs err {worst:.1e}"


@check("oracle.sparse_vs_dense_powers")
def _():
    r = np.random.default_rng(13)
    g = _random_graph(r, 6)
    A = row_normalize(g.adjacency())
    with no_grad():
        E = stack_powers(A, 4).E.data
    err = float(np.abs(E - raw_walk_stack(A, 4)).max())
    return err < 1e-12, f"max abs err {err:.1e}"


@check("oracle.grid_labels")
def _():
    r = np.random.default_rng(14)
    for _ in range(20):
        colors = r.integers(0, 4, size=(int(r.integers(1, 6)), int(r.integers(1, 6))))
        if not np.array_equal(count_labels(colors), oracles.count_labels(colors)):
            return False, f"mismatch on {colors.tolist()}"
    return True, "20 grids"


# -- reductions and invariants ----------------------------------------------

@check("reduction.zero_gate_is_softmax")
def _():
    r = np.random.default_rng(15)
    cfg = DiffuserConfig(in_dim=3, num_classes=3, hidden_dim=8, num_layers=2, heads=2, k=3)
    m = DiffuserModel(cfg, seed=6)
    for name, t in m.params.items():
        if name.endswith("attn.wp") or name == "pe.weight":
            t.data[...] = 0.0
    worst = 0.0
    for _ in range(5):
        g = _random_graph(r, int(r.integers(2, 7)))
        with no_grad():
            out = m.forward([g]).data
        ref = oracles.vanilla_forward(m.params.state_dict(), cfg.num_layers, cfg.heads, g.node_features)
        worst = max(worst, float(np.abs(out - ref).max()))
    return worst < 1e-10, f"max abs err {worst:.1e}"


@check("reduction.zero_weighted_adjacency")
def _():
    r = np.random.default_rng(16)
    g = _random_graph(r, 6, features=4)
    params = zero_weighted_adjacency_params(4)
    with no_grad():
        A = weighted_adjacency(Tensor(g.node_features), None, g.adjacency(), params, training=False)
    err = float(np.abs(A.to_dense() - row_normalize(g.adjacency()).to_dense()).max())
    return err < 1e-12, f"max abs err {err:.1e}"


@check("invariant.attention_rows")
def _():
    r = np.random.default_rng(17)
    cfg = DiffuserConfig(in_dim=3, num_classes=3, hidden_dim=8, num_layers=2, heads=2, k=3)
    m = DiffuserModel(cfg, seed=7)
    graphs = [_random_graph(r, n) for n in (3, 5, 2)]
    with no_grad():
        tr = m.trace(graphs, keep=True)
    worst = 0.0
    for att in tr.attention:
        for b, g in enumerate(graphs):
            n = g.num_nodes
            worst = max(worst, float(np.abs(att[b, :, :n, :n].sum(-1) - 1).max()))
            if np.abs(att[b, :, :n, n:]).max(initial=0.0) > 0 or np.abs(att[b, :, n:, :]).max(initial=0.0) > 0:
                return False, f"attention mass outside graph {b}"
    return worst < 1e-8, f"max row-sum deviation {worst:.1e}"


@check("invariant.permutation_equivariance")
def _():
    r = np.random.default_rng(18)
    cfg = DiffuserConfig(in_dim=3, num_classes=3, hidden_dim=8, num_layers=2, heads=2, k=3,
                         use_weighted_adjacency=True)
    m = DiffuserModel(cfg, seed=8)
    g = _random_graph(r, 6)
    perm = r.permutation(6)
    with no_grad():
        a = m.forward([g]).data
        b = m.forward([g.permute(perm)]).data
    err = float(np.abs(b[perm] - a).max())
    return err < 1e-9, f"max abs err {err:.1e}"


def run(names=None) -> list:
    """Run all (or the named) checks; returns ``[(name, passed, detail)]``."""
    results = []
    for name, fn in CHECKS:
        if names and name not in names:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:   # noqa: BLE001 - a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results


def format_report(results) -> str:
    lines = [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in results]
    failed = sum(not ok for _, ok, _ in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
