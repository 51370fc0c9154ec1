"""Slow, direct reference computations used to cross-check the fast paths.

Nothing here touches the autodiff engine or the sparse kernels.
"""
from __future__ import annotations

import numpy as np


def walk_probabilities(num_nodes: int, edges, k: int, directed: bool = False) -> np.ndarray:
    """Enumerate every walk of length <= k; slot ``[i, j, t]`` sums the
    probability products (1/out-degree per step) of length-t walks i -> j."""
    nbrs = [set() for _ in range(num_nodes)]
    for s, d in edges:
        nbrs[s].add(d)
        if not directed:
            nbrs[d].add(s)
    nbrs = [sorted(x) for x in nbrs]
    out = np.zeros((num_nodes, num_nodes, k + 1))

    def walk(start, node, depth, prob):
        out[start, node, depth] += prob
        if depth == k or not nbrs[node]:
            return
        p = prob / len(nbrs[node])
        for nxt in nbrs[node]:
            walk(start, nxt, depth + 1, p)

    for i in range(num_nodes):
        walk(i, i, 0, 1.0)
    return out


def count_labels(colors) -> np.ndarray:
    colors = np.asarray(colors)
    rows, cols = colors.shape
    out = np.zeros((rows, cols), dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            same = 0
            for c2 in range(cols):
                if c2 != c and colors[r, c2] == colors[r, c]:
                    same += 1
            for r2 in range(rows):
                if r2 != r and colors[r2, c] == colors[r, c]:
                    same += 1
            out[r, c] = same
    return out


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _bn_eval(x, gamma, beta, mean, var, eps=1e-5):
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def vanilla_attention(x, wq, wk, wv, wo, bo, heads):
    """Multi-head softmax attention for one graph, one head at a time."""
    n, d = x.shape
    dh = d // heads
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        q, k, v = x @ wq[:, sl], x @ wk[:, sl], x @ wv[:, sl]
        att = _softmax_rows(q @ k.T / np.sqrt(dh))
        outs.append(att @ v)
    return np.concatenate(outs, axis=1) @ wo + bo


def vanilla_forward(state: dict, num_layers: int, heads: int, X: np.ndarray) -> np.ndarray:
    """Eval-mode vanilla transformer (batch-norm, post-residual) on one graph.

    ``state`` is a parameter state dict as produced by ``ModelParams.state_dict``.
    """
    s = state
    x = X @ s["embed.weight"] + s["embed.bias"]
    for l in range(num_layers):
        p = f"layers.{l}"
        a = vanilla_attention(x, s[f"{p}.attn.wq"], s[f"{p}.attn.wk"], s[f"{p}.attn.wv"],
                              s[f"{p}.attn.wo"], s[f"{p}.attn.bo"], heads)
        x = _bn_eval(x + a, s[f"{p}.norm1.gamma"], s[f"{p}.norm1.beta"],
                     s[f"{p}.norm1.running_mean"], s[f"{p}.norm1.running_var"])
        f = np.maximum(x @ s[f"{p}.ffn.w1"] + s[f"{p}.ffn.b1"], 0) @ s[f"{p}.ffn.w2"] + s[f"{p}.ffn.b2"]
        x = _bn_eval(x + f, s[f"{p}.norm2.gamma"], s[f"{p}.norm2.beta"],
                     s[f"{p}.norm2.running_mean"], s[f"{p}.norm2.running_var"])
    return x @ s["head.weight"] + s["head.bias"]


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g
