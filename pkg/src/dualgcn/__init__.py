"""Dual-branch graph convolutional networks with a learned affinity graph,
PPMI diffusion, and cluster-partitioned mini-batch training."""

from .data import DatasetBundle, SplitSpec, builtin_karate, load_dataset, make_planetoid_split
from .graph import Graph, PropagationOperator, add_self_loops, build_graph, spmm, sym_normalize
from .graphlearn import GlConfig, LearnedGraph, gl_loss, learn_S_dense, learn_S_masked
from .model import (
    FitResult,
    ModelConfig,
    ModelParams,
    accuracy,
    fit,
    forward,
    predict,
    total_loss,
)
from .cluster import (
    Batch,
    Partition,
    PartitionConfig,
    cluster_fit,
    edge_cut_report,
    form_batch,
    partition_graph,
    split_matrices,
)
from .ppmi import (
    FrequencyMatrix,
    PpmiMatrix,
    WalkConfig,
    exact_frequency_matrix,
    frequency_matrix,
    ppmi,
    ppmi_operator,
    random_walk,
)
from .rng import RngStream

__version__ = "0.1.0"
