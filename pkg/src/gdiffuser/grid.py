"""Grid histogram counting: colored grids where each node counts same-colored
nodes sharing its row or column.

Datasets are reproducible bit-for-bit from ``(seed, sample index)``. Sample
``i`` draws from a Philox4x64-10 stream keyed by ``(seed, i)`` (numpy's
``Philox(key=[seed, i])``), consuming raw 64-bit words in order: one word
picks the column count, then one word per cell in row-major order picks
its color. A word ``w`` maps to ``w % m`` for a range of size ``m``, after
rejecting ``w >= m * floor(2**64 / m)``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph

RNG_NAME = "philox4x64-10/v1"
_M64 = (1 << 64) - 1


class GridRng:
    """Word stream for one sample; see the module docstring for the contract."""

    def __init__(self, seed: int, index: int = 0):
        self._bits = np.random.Philox(key=np.array([seed & _M64, index & _M64], dtype=np.uint64))

    def words(self, count: int) -> np.ndarray:
        return self._bits.random_raw(count).astype(np.uint64)

    def below(self, m: int, count: int | None = None):
        """Uniform integers in ``[0, m)``; a scalar when ``count`` is None."""
        want = 1 if count is None else count
        limit = np.uint64((2**64 // m) * m) if m & (m - 1) else None
        out = []
        while len(out) < want:
            w = self.words(want - len(out))
            if limit is not None:
                w = w[w < limit]
            out.extend((w % np.uint64(m)).tolist())
        return out[0] if count is None else np.asarray(out, dtype=np.int64)


@dataclass
class GridSample:
    rows: int
    cols: int
    colors: np.ndarray
    labels: np.ndarray
    graph: Graph


@dataclass
class DatasetSpec:
    num_graphs: int = 2000
    rows: int = 6
    col_choices: tuple = (6,)
    num_colors: int = 8
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        self.col_choices = tuple(int(c) for c in self.col_choices)
        self.split = tuple(float(f) for f in self.split)
        if self.num_graphs < 1:
            raise ValueError("num_graphs must be >= 1")
        if self.rows < 1 or not self.col_choices or min(self.col_choices) < 1:
            raise ValueError("grid dimensions must be >= 1")
        if self.num_colors < 2:
            raise ValueError("num_colors must be >= 2")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions must be three nonnegatives summing to 1, got {self.split}")

    @property
    def num_classes(self) -> int:
        return (self.rows - 1) + (max(self.col_choices) - 1) + 1

    def split_sizes(self):
        n_train = int(round(self.split[0] * self.num_graphs))
        n_val = int(round(self.split[1] * self.num_graphs))
        return n_train, n_val, self.num_graphs - n_train - n_val


@dataclass
class GridDataset:
    spec: DatasetSpec
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def graphs(self, split: str) -> list:
        return [s.graph for s in getattr(self, split)]


def count_labels(colors) -> np.ndarray:
    """Same-colored nodes in each node's row plus those in its column, self excluded."""
    colors = np.asarray(colors, dtype=np.int64)
    rows, cols = colors.shape
    C = int(colors.max()) + 1 if colors.size else 1
    onehot = np.eye(C, dtype=np.int64)[colors]          # [r, c, C]
    per_row = onehot.sum(axis=1)                          # [r, C]
    per_col = onehot.sum(axis=0)                          # [c, C]
    r_idx, c_idx = np.indices((rows, cols))
    return per_row[r_idx, colors] - 1 + per_col[c_idx, colors] - 1


def grid_edges(rows: int, cols: int) -> np.ndarray:
    """4-neighbour edges (right and down neighbours), each listed once."""
    ids = np.arange(rows * cols).reshape(rows, cols)
    right = np.stack([ids[:, :-1].ravel(), ids[:, 1:].ravel()], axis=1)
    down = np.stack([ids[:-1, :].ravel(), ids[1:, :].ravel()], axis=1)
    edges = np.concatenate([right, down], axis=0)
    return edges[np.lexsort((edges[:, 1], edges[:, 0]))]


def grid_graph(colors, num_colors: int, labels=None) -> Graph:
    colors = np.asarray(colors, dtype=np.int64)
    rows, cols = colors.shape
    return Graph(
        num_nodes=rows * cols,
        node_features=np.eye(num_colors)[colors.ravel()],
        edge_list=grid_edges(rows, cols),
        labels=None if labels is None else np.asarray(labels).ravel(),
        attributes={"rows": rows, "cols": cols},
    )


def generate_grid(rows: int, cols: int, num_colors: int, rng) -> GridSample:
    """``rng`` is a :class:`GridRng`, a numpy ``Generator`` or an int seed."""
    if rows < 1 or cols < 1 or num_colors < 1:
        raise ValueError("rows, cols and num_colors must be >= 1")
    if isinstance(rng, (int, np.integer)):
        rng = GridRng(int(rng))
    if isinstance(rng, GridRng):
        colors = rng.below(num_colors, rows * cols).reshape(rows, cols)
    else:
        colors = rng.integers(0, num_colors, size=(rows, cols))
    labels = count_labels(colors)
    return GridSample(rows, cols, colors, labels, grid_graph(colors, num_colors, labels))


def _sample(spec: DatasetSpec, index: int) -> GridSample:
    rng = GridRng(spec.seed, index)
    cols = spec.col_choices[rng.below(len(spec.col_choices))]
    return generate_grid(spec.rows, cols, spec.num_colors, rng)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GD_THREADS", "1")))
    except ValueError:
        return 1


def make_dataset(spec: DatasetSpec, workers: int | None = None) -> GridDataset:
    """Generate ``spec.num_graphs`` samples and split them by position."""
    workers = worker_count() if workers is None else workers
    idx = range(spec.num_graphs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(lambda i: _sample(spec, i), idx))
    else:
        samples = [_sample(spec, i) for i in idx]
    n_train, n_val, _ = spec.split_sizes()
    return GridDataset(spec, samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:])
