"""Graph Diffuser: transformer attention over virtual edges built from
random-walk powers of the (optionally learned) adjacency."""
from .estimator import DiffuserNodeClassifier, RandomWalkEncoder
from .graph import BatchedGraph, Graph, GraphError, SparseRowMatrix, block_diagonal_batch, build_csr, row_normalize
from .grid import DatasetSpec, GridDataset, make_dataset
from .model import DiffuserConfig, DiffuserModel, vanilla_transformer_baseline
from .train import RunReport, TrainConfig, TrainingDiverged, evaluate, run_seeds, train
from .virtual_edges import VirtualEdges, edge_ffn, self_edge_encoding, stack_powers, weighted_adjacency

__version__ = "0.1.0"

__all__ = [
    "BatchedGraph", "DatasetSpec", "DiffuserConfig", "DiffuserModel", "DiffuserNodeClassifier", "Graph",
    "GraphError", "GridDataset", "RandomWalkEncoder", "RunReport", "SparseRowMatrix", "TrainConfig",
    "TrainingDiverged", "VirtualEdges", "block_diagonal_batch", "build_csr", "edge_ffn", "evaluate",
    "make_dataset", "row_normalize", "run_seeds", "self_edge_encoding", "stack_powers", "train",
    "vanilla_transformer_baseline", "weighted_adjacency",
]
