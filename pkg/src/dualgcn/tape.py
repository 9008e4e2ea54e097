"""Recorded-tape reverse-mode gradients over dense and masked-sparse values.

This is not a general autodiff system: the op set below is exactly what
the two-branch convolution network with a learned affinity graph needs,
which keeps the surface small enough to verify entry-by-entry against
central finite differences (see optim.finite_diff_check).

Conventions
-----------
* Values are float64 numpy arrays.  Constants enter as plain arrays (or
  scipy sparse matrices for the fixed propagation operators) and never
  receive gradients.
* A forward pass builds a DAG of Tensor nodes; ``backward(loss)``
  accumulates d loss / d leaf into every reachable Parameter's ``grad``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Parameter",
    "backward",
    "constant",
    "matmul",
    "sparse_matmul",
    "add",
    "scale",
    "relu",
    "row_softmax",
    "dropout",
    "masked_cross_entropy",
    "branch_agreement_loss",
    "spmm_const",
    "vdot_const",
    "sum_sq",
    "sum_sq_diff",
    "tape_nbytes",
]

LOG_CLAMP = 1e-12  # floor for ln arguments; keeps early-training losses finite


class Tensor:
    """A node of the recorded computation graph."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "needs_grad")

    def __init__(self, value, parents=(), vjp=None, needs_grad=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._vjp = vjp
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in self._parents)
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> np.ndarray:
        return np.array(self.value, copy=True)


class Parameter(Tensor):
    """A trainable leaf; gradient accumulates across a backward pass."""

    __slots__ = ("name",)

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64, copy=True), needs_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = None


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), needs_grad=False)


def _accumulate(node: Tensor, g):
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss; accumulates into Parameter.grad."""
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    # topological order by depth-first post-order
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.needs_grad:
                continue
            _accumulate(parent, g)


def tape_nbytes(root: Tensor) -> int:
    """Total bytes of values recorded on the tape reachable from root."""
    total = 0
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        total += node.value.nbytes
        stack.extend(node._parents)
    return total


# ---------------------------------------------------------------------------
# dense kernels
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[-1] != b.value.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def vjp(g):
        ga = g @ b.value.T if a.needs_grad else None
        gb = a.value.T @ g if b.needs_grad else None
        return ga, gb

    return Tensor(out, (a, b), vjp)


def sparse_matmul(a_const: sp.spmatrix, b: Tensor) -> Tensor:
    """Constant sparse matrix times a tape value (features @ weights)."""
    if a_const.shape[1] != b.value.shape[0]:
        raise ValueError(f"sparse_matmul dimension mismatch: {a_const.shape} @ {b.value.shape}")
    out = a_const @ b.value

    def vjp(g):
        return (a_const.T @ g,)

    return Tensor(np.asarray(out), (b,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.value + b.value

    def vjp(g):
        return g, g

    return Tensor(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.value * c

    def vjp(g):
        return (g * c,)

    return Tensor(out, (a,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    out = np.where(mask, x.value, 0.0)

    def vjp(g):
        return (g * mask,)

    return Tensor(out, (x,), vjp)


def row_softmax(x: Tensor) -> Tensor:
    v = x.value
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, (x,), vjp)


def dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; eval mode (or rate 0) is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.value.shape) >= rate
    scale_ = 1.0 / (1.0 - rate)
    out = np.where(keep, x.value * scale_, 0.0)

    def vjp(g):
        return (np.where(keep, g * scale_, 0.0),)

    return Tensor(out, (x,), vjp)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def masked_cross_entropy(z: Tensor, labels, mask_idx, reduction: str = "sum") -> Tensor:
    """Negative log likelihood of the true class over the masked nodes.

    ``z`` holds row-softmax outputs; ln arguments are clamped below at
    LOG_CLAMP so the loss stays finite.
    """
    mask_idx = np.asarray(mask_idx, dtype=np.int64)
    if mask_idx.size == 0:
        raise ValueError("masked_cross_entropy: empty mask")
    labels = np.asarray(labels, dtype=np.int64)
    y = labels[mask_idx]
    if y.min() < 0 or y.max() >= z.value.shape[1]:
        raise ValueError("label out of class range")
    zt = z.value[mask_idx, y]
    clamped = np.maximum(zt, LOG_CLAMP)
    per_node = -np.log(clamped)
    coef = 1.0 / mask_idx.size if reduction == "mean" else 1.0
    out = per_node.sum() * coef

    def vjp(g):
        gz = np.zeros_like(z.value)
        live = zt > LOG_CLAMP
        gz[mask_idx[live], y[live]] = -float(g) * coef / zt[live]
        return (gz,)

    return Tensor(np.float64(out), (z,), vjp)


def branch_agreement_loss(zp: Tensor, za: Tensor, mean_over_rows: bool = True) -> Tensor:
    """Squared distance between the two branches' softmax outputs.

    Defaults to the full squared Frobenius distance divided by the row
    count; ``mean_over_rows=False`` gives the raw sum.
    """
    if zp.value.shape != za.value.shape:
        raise ValueError(f"shape mismatch: {zp.value.shape} vs {za.value.shape}")
    diff = zp.value - za.value
    coef = 1.0 / zp.value.shape[0] if mean_over_rows else 1.0
    out = coef * float((diff * diff).sum())

    def vjp(g):
        base = (2.0 * coef * float(g)) * diff
        gp = base if zp.needs_grad else None
        ga = -base if za.needs_grad else None
        return gp, ga

    return Tensor(np.float64(out), (zp, za), vjp)


def spmm_const(op_const: sp.spmatrix, h: Tensor) -> Tensor:
    """Fixed propagation operator times a tape value."""
    if op_const.shape[1] != h.value.shape[0]:
        raise ValueError(f"spmm dimension mismatch: {op_const.shape} @ {h.value.shape}")
    out = op_const @ h.value

    def vjp(g):
        return (op_const.T @ g,)

    return Tensor(np.asarray(out), (h,), vjp)


def vdot_const(t: Tensor, c) -> Tensor:
    """<t, c> for a constant c of the same shape."""
    c = np.asarray(c, dtype=np.float64)
    out = float((t.value * c).sum())

    def vjp(g):
        return (float(g) * c,)

    return Tensor(np.float64(out), (t,), vjp)


def sum_sq(t: Tensor) -> Tensor:
    out = float((t.value * t.value).sum())

    def vjp(g):
        return (2.0 * float(g) * t.value,)

    return Tensor(np.float64(out), (t,), vjp)


def sum_sq_diff(t: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    diff = t.value - c
    out = float((diff * diff).sum())

    def vjp(g):
        return (2.0 * float(g) * diff,)

    return Tensor(np.float64(out), (t,), vjp)


# ---------------------------------------------------------------------------
# masked-sparse ops: values live on a fixed CSR support (rows, cols, indptr)
# ---------------------------------------------------------------------------

def edge_abs_diff(xp: Tensor, rows, cols, scatter_r=None, scatter_c=None) -> Tensor:
    """|xp[rows] - xp[cols]| per support entry, shape (nnz, p).

    scatter_r / scatter_c are optional precomputed (n x nnz) CSR selection
    transposes used to push gradients back without np.add.at.
    """
    left = xp.value[rows]
    right = xp.value[cols]
    diff = left - right
    sign = np.sign(diff)
    out = np.abs(diff)

    def vjp(g):
        gs = g * sign
        if scatter_r is not None:
            gx = scatter_r @ gs
            gx -= scatter_c @ gs
        else:
            gx = np.zeros_like(xp.value)
            np.add.at(gx, rows, gs)
            np.subtract.at(gx, cols, gs)
        return (gx,)

    return Tensor(out, (xp,), vjp)


def matvec(e: Tensor, a: Tensor) -> Tensor:
    """(nnz, p) matrix times length-p vector -> (nnz,) scores."""
    if e.value.shape[1] != a.value.shape[0]:
        raise ValueError(f"matvec dimension mismatch: {e.value.shape} @ {a.value.shape}")
    out = e.value @ a.value

    def vjp(g):
        ge = g[:, None] * a.value[None, :] if e.needs_grad else None
        ga = e.value.T @ g if a.needs_grad else None
        return ge, ga

    return Tensor(out, (e, a), vjp)


def segment_softmax(scores: Tensor, indptr) -> Tensor:
    """Softmax within each CSR row segment of a flat score vector."""
    indptr = np.asarray(indptr, dtype=np.int64)
    counts = np.diff(indptr)
    if (counts == 0).any():
        raise ValueError("segment_softmax: empty row segment")
    starts = indptr[:-1]
    v = scores.value
    seg_max = np.maximum.reduceat(v, starts)
    e = np.exp(v - np.repeat(seg_max, counts))
    sums = np.add.reduceat(e, starts)
    out = e / np.repeat(sums, counts)

    def vjp(g):
        inner = np.add.reduceat(g * out, starts)
        return (out * (g - np.repeat(inner, counts)),)

    return Tensor(out, (scores,), vjp)


def sym_normalize_values(s: Tensor, rows, cols, indptr, n: int) -> Tensor:
    """D^{-1/2} S D^{-1/2} on CSR values, D the row sums of S.

    Zero-degree rows map to zero, matching graph.sym_normalize.
    """
    indptr = np.asarray(indptr, dtype=np.int64)
    starts = indptr[:-1]
    deg = np.add.reduceat(s.value, starts) if s.value.size else np.zeros(n)
    pos = deg > 0
    u = np.zeros_like(deg)
    u[pos] = deg[pos] ** -0.5
    out = s.value * u[rows] * u[cols]

    def vjp(g):
        direct = g * u[rows] * u[cols]
        uprime = np.zeros_like(deg)
        uprime[pos] = -0.5 * deg[pos] ** -1.5
        w = g * s.value
        row_acc = np.add.reduceat(w * u[cols], starts) * uprime
        col_acc = np.bincount(cols, weights=w * u[rows], minlength=n) * uprime
        return (direct + (row_acc + col_acc)[rows],)

    return Tensor(out, (s,), vjp)


def spmm_values(t_vals: Tensor, rows, cols, indptr, n: int, h: Tensor) -> Tensor:
    """CSR matrix with tape-tracked values times a dense tape value."""
    mat = sp.csr_matrix((t_vals.value, cols, indptr), shape=(n, n))
    out = mat @ h.value

    def vjp(g):
        gt = (g[rows] * h.value[cols]).sum(axis=1) if t_vals.needs_grad else None
        gh = mat.T @ g if h.needs_grad else None
        return gt, gh

    return Tensor(np.asarray(out), (t_vals, h), vjp)


# ---------------------------------------------------------------------------
# dense-mode graph-learning ops (no adjacency mask; blockwise to bound memory)
# ---------------------------------------------------------------------------

def pairwise_abs_scores(xp: Tensor, a: Tensor, block: int = 256) -> Tensor:
    """Scores m[i, j] = sum_f a[f] * |xp[i, f] - xp[j, f]| for all pairs.

    Materializes |x_i - x_j| one row-block at a time (and again on the
    backward pass) so peak memory is block * n * p.
    """
    n = xp.value.shape[0]
    out = np.empty((n, n))
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        d = np.abs(xp.value[lo:hi, None, :] - xp.value[None, :, :])
        out[lo:hi] = d @ a.value

    def vjp(g):
        ga = np.zeros_like(a.value) if a.needs_grad else None
        gx = np.zeros_like(xp.value) if xp.needs_grad else None
        for lo in range(0, n, block):
            hi = min(lo + block, n)
            diff = xp.value[lo:hi, None, :] - xp.value[None, :, :]
            if ga is not None:
                ga += np.einsum("ij,ijf->f", g[lo:hi], np.abs(diff))
            if gx is not None:
                signed = np.sign(diff) * a.value[None, None, :]
                gx[lo:hi] += np.einsum("ij,ijf->if", g[lo:hi], signed)
                gx -= np.einsum("ij,ijf->jf", g[lo:hi], signed)
        return gx, ga

    return Tensor(out, (xp, a), vjp)


def sym_normalize_dense(s: Tensor) -> Tensor:
    """Dense D^{-1/2} S D^{-1/2} with D the row sums of S."""
    deg = s.value.sum(axis=1)
    pos = deg > 0
    u = np.zeros_like(deg)
    u[pos] = deg[pos] ** -0.5
    out = s.value * u[:, None] * u[None, :]

    def vjp(g):
        direct = g * u[:, None] * u[None, :]
        uprime = np.zeros_like(deg)
        uprime[pos] = -0.5 * deg[pos] ** -1.5
        w = g * s.value
        row_acc = (w * u[None, :]).sum(axis=1) * uprime
        col_acc = (w * u[:, None]).sum(axis=0) * uprime
        return (direct + (row_acc + col_acc)[:, None],)

    return Tensor(out, (s,), vjp)
