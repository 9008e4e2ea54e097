"""Learned affinity graph: pair scorer, row-softmax normalization, loss.

The learner scores node pairs by a^T |x_i - x_j| (optionally after a
linear projection of the features), passes the scores through ReLU and
normalizes each row with a softmax, so S is non-negative and
row-stochastic.  With an adjacency available the scores are restricted
to the support of A + I; otherwise every pair participates (dense mode,
memory-guarded).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .graph import Graph
from .rng import RngStream
from . import tape
from .tape import Parameter, Tensor

__all__ = [
    "GlConfig",
    "GraphLearnerParams",
    "SupportStructure",
    "LearnedGraph",
    "init_graph_learner",
    "learn_S_dense",
    "learn_S_masked",
    "gl_loss",
    "support_distances",
    "pairwise_sq_distances",
]


@dataclass(frozen=True)
class GlConfig:
    """Sparsity weight gamma_reg and adjacency-fidelity weight beta."""

    gamma_reg: float = 0.01
    beta: float = 0.1

    def __post_init__(self):
        if self.gamma_reg < 0 or self.beta < 0:
            raise ConfigError("gamma_reg and beta must be non-negative")


@dataclass
class GraphLearnerParams:
    """Learnable scorer vector a and optional feature projection."""

    a: Parameter
    proj: Parameter | None = None

    def parameters(self) -> list[Parameter]:
        out = []
        if self.proj is not None:
            out.append(self.proj)
        out.append(self.a)
        return out


def init_graph_learner(p_features: int, hidden: int | None, rng: RngStream) -> GraphLearnerParams:
    """Uniform +-1/sqrt(dim) scorer; glorot projection when hidden is set."""
    proj = None
    dim = p_features
    if hidden is not None:
        limit = np.sqrt(6.0 / (p_features + hidden))
        proj = Parameter(rng.child("init", "proj").uniform(-limit, limit, (p_features, hidden)), name="gl.proj")
        dim = hidden
    bound = 1.0 / np.sqrt(dim)
    a = Parameter(rng.child("init", "a").uniform(-bound, bound, dim), name="gl.a")
    return GraphLearnerParams(a=a, proj=proj)


class SupportStructure:
    """Frozen CSR pattern (of A + I) shared by S, its operator and losses."""

    def __init__(self, g: Graph):
        adj = g.adj
        if (adj.diagonal() == 0).any():
            raise ValueError("support graph must carry self-loops on every node")
        self.n = g.n
        self.indptr = adj.indptr.copy()
        self.cols = adj.indices.astype(np.int64, copy=True)
        self.counts = np.diff(self.indptr)
        self.rows = np.repeat(np.arange(self.n, dtype=np.int64), self.counts)
        nnz = self.cols.size
        ones = np.ones(nnz)
        arange = np.arange(nnz)
        # (n x nnz) transposed selectors; used to scatter edge gradients to nodes
        self.scatter_r = sp.csr_matrix((ones, (self.rows, arange)), shape=(self.n, nnz))
        self.scatter_c = sp.csr_matrix((ones, (self.cols, arange)), shape=(self.n, nnz))
        self._absdiff_key = None
        self._absdiff = None

    @property
    def nnz(self) -> int:
        return self.cols.size

    def edge_absdiff(self, x) -> np.ndarray:
        """Constant |x_i - x_j| on the support, cached per feature matrix."""
        if self._absdiff_key != id(x):
            diff = x[self.rows] - x[self.cols]
            self._absdiff = np.abs(diff.toarray() if sp.issparse(diff) else diff)
            self._absdiff_key = id(x)
        return self._absdiff


@dataclass
class LearnedGraph:
    """Row-stochastic learned affinity, masked to a support or dense."""

    n: int
    mode: str  # "masked" | "dense"
    values: Tensor = field(repr=False)
    support: SupportStructure | None = None

    def matrix(self) -> sp.csr_matrix | np.ndarray:
        """Detached copy of S as a concrete matrix (for walks, caching)."""
        if self.mode == "masked":
            s = self.support
            return sp.csr_matrix((self.values.value.copy(), s.cols.copy(), s.indptr.copy()), shape=(self.n, self.n))
        return self.values.value.copy()


def _project(x, gl: GraphLearnerParams):
    """Feature input for the scorer: projected (tape) or raw (constant)."""
    if gl.proj is None:
        return x
    if sp.issparse(x):
        return tape.sparse_matmul(x, gl.proj)
    return tape.matmul(tape.constant(x), gl.proj)


def learn_S_masked(x, g: Graph, gl: GraphLearnerParams, support: SupportStructure | None = None) -> LearnedGraph:
    """Affinity restricted to the support of g (which must hold self-loops).

    S_ij = A~_ij exp(ReLU(a^T |x_i - x_j|)) / sum_j A~_ij exp(...), so each
    row is a softmax over the node's closed neighborhood.
    """
    if support is None:
        support = SupportStructure(g)
    xp = _project(x, gl)
    if isinstance(xp, Tensor):
        e = tape.edge_abs_diff(xp, support.rows, support.cols, support.scatter_r, support.scatter_c)
    else:
        e = tape.constant(support.edge_absdiff(xp))
    scores = tape.relu(tape.matvec(e, gl.a))
    values = tape.segment_softmax(scores, support.indptr)
    return LearnedGraph(n=support.n, mode="masked", values=values, support=support)


def learn_S_dense(x, gl: GraphLearnerParams, dense_limit: int = 20000) -> LearnedGraph:
    """All-pairs affinity for data without a graph; rows softmax to 1.

    Callers announce the n^2 memory cost up front (see model._GraphContext);
    here only the hard limit is enforced.
    """
    n = x.shape[0]
    if n > dense_limit:
        raise ConfigError(
            f"dense affinity needs n <= {dense_limit} (got n={n}); "
            "provide a graph or use cluster training"
        )
    xp = _project(x, gl)
    if not isinstance(xp, Tensor):
        xp = tape.constant(xp.toarray() if sp.issparse(xp) else xp)
    scores = tape.relu(tape.pairwise_abs_scores(xp, gl.a))
    values = tape.row_softmax(scores)
    return LearnedGraph(n=n, mode="dense", values=values)


def support_distances(x, support: SupportStructure) -> np.ndarray:
    """||x_i - x_j||^2 per support entry (constant wrt parameters)."""
    if sp.issparse(x):
        sq = np.asarray(x.multiply(x).sum(axis=1)).ravel()
        dots = np.asarray(x[support.rows].multiply(x[support.cols]).sum(axis=1)).ravel()
    else:
        x = np.asarray(x, dtype=np.float64)
        sq = (x * x).sum(axis=1)
        dots = (x[support.rows] * x[support.cols]).sum(axis=1)
    d2 = sq[support.rows] + sq[support.cols] - 2.0 * dots
    return np.maximum(d2, 0.0)


def pairwise_sq_distances(x) -> np.ndarray:
    """Dense n x n matrix of squared feature distances."""
    if sp.issparse(x):
        x = x.toarray()
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.maximum(d2, 0.0)


def gl_loss(x, s: LearnedGraph, a_graph: Graph | None = None, cfg: GlConfig = GlConfig(),
            dist2: np.ndarray | None = None) -> Tensor:
    """Graph-learning objective.

    sum_ij ||x_i - x_j||^2 S_ij + gamma ||S||_F^2, plus (when a graph is
    given) beta ||S - A~||_F^2 against the binary support of A + I, which
    is exactly the support S is stored on.
    """
    if s.mode == "masked":
        if dist2 is None:
            dist2 = support_distances(x, s.support)
        loss = tape.add(tape.vdot_const(s.values, dist2), tape.scale(tape.sum_sq(s.values), cfg.gamma_reg))
        if a_graph is not None and cfg.beta > 0:
            target = np.ones(s.support.nnz)
            loss = tape.add(loss, tape.scale(tape.sum_sq_diff(s.values, target), cfg.beta))
        return loss
    if dist2 is None:
        dist2 = pairwise_sq_distances(x)
    return tape.add(tape.vdot_const(s.values, dist2), tape.scale(tape.sum_sq(s.values), cfg.gamma_reg))
