"""The two-branch network: learned-affinity convolution branch, PPMI
convolution branch, combined objective and the full-batch trainer.

Branch A propagates through D_s^{-1/2} S D_s^{-1/2} where S is the
learned affinity (or a frozen normalized adjacency); branch P propagates
through the normalized PPMI matrix of S, refreshed on a fixed epoch
schedule.  Both branches end in a row softmax; the objective is

    L = L_ce + lambda1 * L_agree + lambda2 * L_graphlearn

with supervision attached to branch A by default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, NumericError
from .graph import Graph, PropagationOperator, add_self_loops, sym_normalize
from .graphlearn import (
    GlConfig,
    GraphLearnerParams,
    LearnedGraph,
    SupportStructure,
    gl_loss,
    init_graph_learner,
    learn_S_dense,
    learn_S_masked,
    pairwise_sq_distances,
    support_distances,
)
from .optim import adam_step, init_adam_states
from .ppmi import WalkConfig, frequency_matrix, ppmi, ppmi_operator
from .rng import RngStream
from . import tape
from .tape import Parameter, Tensor

__all__ = [
    "ModelConfig",
    "ModelParams",
    "ForwardCache",
    "FitResult",
    "init_params",
    "forward",
    "total_loss",
    "fit",
    "predict",
    "accuracy",
    "save_checkpoint",
    "load_checkpoint",
    "HISTORY_COLUMNS",
]

HISTORY_COLUMNS = ("epoch", "train_loss", "l0", "lreg", "lgl", "val_acc")


@dataclass(frozen=True)
class ModelConfig:
    hidden_gcn: int = 16
    hidden_gl: int | None = 200  # None scores raw features
    depth: int = 2
    share_weights: bool = True
    supervise: str = "a"  # which branch carries the cross-entropy: a | p | both
    lambda1: float = 0.01
    lambda2: float = 0.01
    dropout: float = 0.6
    lr1: float = 0.005
    lr2: float = 0.005
    weight_decay: float = 5e-3
    epochs: int = 1000
    seed: int = 0
    ppmi_refresh: int = 25  # recompute P every R epochs; 0 = once from the initial S
    walk: WalkConfig = field(default_factory=WalkConfig)
    gl: GlConfig = field(default_factory=GlConfig)
    ce_reduction: str = "sum"  # sum per labeled node, or mean
    agreement_mean: bool = True  # divide branch distance by node count
    learn_graph: bool = True  # False freezes S to the normalized adjacency
    stop_threshold: float = 0.0  # stop when max-abs param change falls below; 0 disables
    dense_limit: int = 20000
    eval_every: int = 1
    init: str = "glorot"  # "he" keeps gradients alive through deep ReLU stacks

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.init not in ("glorot", "he"):
            raise ConfigError("init must be glorot|he")
        if self.hidden_gcn < 1 or (self.hidden_gl is not None and self.hidden_gl < 1):
            raise ConfigError("hidden widths must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.supervise not in ("a", "p", "both"):
            raise ConfigError(f"supervise must be a|p|both, got {self.supervise}")
        if self.ce_reduction not in ("sum", "mean"):
            raise ConfigError("ce_reduction must be sum|mean")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class ModelParams:
    """Graph-learner parameters plus per-layer weights for both branches.

    When weights are shared, w_a and w_p hold the same Parameter objects.
    gl is None when the affinity is frozen to the normalized adjacency.
    """

    gl: GraphLearnerParams | None
    w_a: list[Parameter]
    w_p: list[Parameter]
    share_weights: bool

    def gl_parameters(self) -> list[Parameter]:
        return self.gl.parameters() if self.gl is not None else []

    def conv_parameters(self) -> list[Parameter]:
        params = list(self.w_a)
        if not self.share_weights:
            params.extend(self.w_p)
        return params

    def all_parameters(self) -> list[Parameter]:
        return self.gl_parameters() + self.conv_parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.all_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.all_parameters():
            p.value[...] = state[p.name]


def _glorot(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def _he(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    # doubled-variance fan-in init: one sqrt(2) gain for ReLU, one for the
    # averaging propagation operator, both of which attenuate deep stacks
    limit = np.sqrt(12.0 / fan_in)
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def init_params(p_in: int, n_classes: int, cfg: ModelConfig, rng: RngStream) -> ModelParams:
    widths = [p_in] + [cfg.hidden_gcn] * (cfg.depth - 1) + [n_classes]
    draw = _he if cfg.init == "he" else _glorot
    w_a = [
        Parameter(draw(rng.child("init", "W", layer), widths[layer], widths[layer + 1]), name=f"W.{layer}")
        for layer in range(cfg.depth)
    ]
    if cfg.share_weights:
        w_p = list(w_a)
    else:
        w_p = [
            Parameter(draw(rng.child("init", "WP", layer), widths[layer], widths[layer + 1]), name=f"WP.{layer}")
            for layer in range(cfg.depth)
        ]
    gl = init_graph_learner(p_in, cfg.hidden_gl, rng) if cfg.learn_graph else None
    return ModelParams(gl=gl, w_a=w_a, w_p=w_p, share_weights=cfg.share_weights)


@dataclass
class ForwardCache:
    """Branch outputs after softmax plus the affinity used."""

    za: Tensor
    zp: Tensor | None
    s: object  # LearnedGraph or PropagationOperator

    def tape_bytes(self) -> int:
        total = tape.tape_nbytes(self.za)
        if self.zp is not None:
            total += tape.tape_nbytes(self.zp)
        return total


def _dropout_any(h, rate: float, rng, training: bool):
    """Dropout for tape values and for constant dense/sparse inputs."""
    if not training or rate == 0.0:
        return h
    if isinstance(h, Tensor):
        return tape.dropout(h, rate, rng, True)
    scale = 1.0 / (1.0 - rate)
    if sp.issparse(h):
        keep = rng.random(h.data.shape) >= rate
        out = h.copy()
        out.data = np.where(keep, out.data * scale, 0.0)
        return out
    keep = rng.random(h.shape) >= rate
    return np.where(keep, h * scale, 0.0)


def _matmul_any(h, w: Parameter) -> Tensor:
    if isinstance(h, Tensor):
        return tape.matmul(h, w)
    if sp.issparse(h):
        return tape.sparse_matmul(h, w)
    return tape.matmul(tape.constant(h), w)


def _branch(x, apply_op, weights, tag: str, cfg: ModelConfig, rng, training: bool, epoch: int) -> Tensor:
    h = x
    last = len(weights) - 1
    for layer, w in enumerate(weights):
        drop_rng = rng.child("dropout", epoch, tag, layer) if training else None
        h = _dropout_any(h, cfg.dropout, drop_rng, training)
        u = _matmul_any(h, w)
        v = apply_op(u)
        h = tape.relu(v) if layer < last else v
    return tape.row_softmax(h)


def forward(x, s, p_op: PropagationOperator | None, params: ModelParams, cfg: ModelConfig,
            mode: str = "train", rng: RngStream | None = None, epoch: int = 0) -> ForwardCache:
    """Run both branches; p_op None skips the PPMI branch entirely.

    s is either a LearnedGraph (tape-tracked affinity) or a fixed
    PropagationOperator.  ReLU sits between layers, none after the last;
    dropout is applied to every layer input in training mode.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train|eval, got {mode}")
    training = mode == "train"
    if training and rng is None:
        raise ConfigError("training forward needs an RngStream for dropout")
    if isinstance(s, LearnedGraph):
        if s.mode == "masked":
            sup = s.support
            t_vals = tape.sym_normalize_values(s.values, sup.rows, sup.cols, sup.indptr, s.n)

            def apply_s(u):
                return tape.spmm_values(t_vals, sup.rows, sup.cols, sup.indptr, s.n, u)

        else:
            t_dense = tape.sym_normalize_dense(s.values)

            def apply_s(u):
                return tape.matmul(t_dense, u)

    elif isinstance(s, PropagationOperator):
        mat = s.matrix

        def apply_s(u):
            return tape.spmm_const(mat, u)

    else:
        raise ConfigError(f"unsupported affinity object: {type(s)!r}")

    za = _branch(x, apply_s, params.w_a, "a", cfg, rng, training, epoch)
    zp = None
    if p_op is not None:
        p_mat = p_op.matrix

        def apply_p(u):
            return tape.spmm_const(p_mat, u)

        zp = _branch(x, apply_p, params.w_p, "p", cfg, rng, training, epoch)
    return ForwardCache(za=za, zp=zp, s=s)


def total_loss(cache: ForwardCache, labels, train_idx, gl_term: Tensor | None, cfg: ModelConfig):
    """Combined objective; returns (loss tensor, float components)."""
    train_idx = np.asarray(train_idx)
    if train_idx.dtype == bool:
        train_idx = np.flatnonzero(train_idx)
    if train_idx.size == 0:
        raise DataError("empty training mask")
    if cfg.supervise == "a":
        l0 = tape.masked_cross_entropy(cache.za, labels, train_idx, cfg.ce_reduction)
    elif cfg.supervise == "p":
        if cache.zp is None:
            raise ConfigError("supervise='p' requires the PPMI branch")
        l0 = tape.masked_cross_entropy(cache.zp, labels, train_idx, cfg.ce_reduction)
    else:
        if cache.zp is None:
            raise ConfigError("supervise='both' requires the PPMI branch")
        l0 = tape.scale(
            tape.add(
                tape.masked_cross_entropy(cache.za, labels, train_idx, cfg.ce_reduction),
                tape.masked_cross_entropy(cache.zp, labels, train_idx, cfg.ce_reduction),
            ),
            0.5,
        )
    total = l0
    lreg_val = 0.0
    if cache.zp is not None and cfg.lambda1 > 0:
        lreg = tape.branch_agreement_loss(cache.zp, cache.za, cfg.agreement_mean)
        total = tape.add(total, tape.scale(lreg, cfg.lambda1))
        lreg_val = lreg.item()
    lgl_val = 0.0
    if gl_term is not None and cfg.lambda2 > 0:
        total = tape.add(total, tape.scale(gl_term, cfg.lambda2))
        lgl_val = gl_term.item()
    components = {"total": total.item(), "l0": l0.item(), "lreg": lreg_val, "lgl": lgl_val}
    return total, components


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int
    best_val_acc: float
    epochs_run: int
    skipped_batches: int = 0


class _GraphContext:
    """Prebuilt per-graph structures shared by train and eval passes."""

    def __init__(self, x, graph: Graph | None, cfg: ModelConfig):
        self.x = x
        self.graph = graph
        self.masked = graph is not None
        self.support = None
        self.frozen_op = None
        self.dist2 = None
        if self.masked:
            g_loops = add_self_loops(graph)
            if cfg.learn_graph:
                self.support = SupportStructure(g_loops)
                if cfg.lambda2 > 0:
                    self.dist2 = support_distances(x, self.support)
            else:
                self.frozen_op = sym_normalize(g_loops.adj)
        else:
            if not cfg.learn_graph:
                raise ConfigError("learn_graph=False requires a dataset with a graph")
            n = x.shape[0]
            if n > cfg.dense_limit:
                raise ConfigError(
                    f"dense affinity needs n <= {cfg.dense_limit} (got n={n}); "
                    "provide a graph or use cluster training"
                )
            import sys

            est_mb = 2 * n * n * 8 / 1e6
            print(f"[graph-learning] dense mode: n={n}, ~{est_mb:.0f} MB for S and distances",
                  file=sys.stderr)
            if cfg.lambda2 > 0:
                self.dist2 = pairwise_sq_distances(x)

    def build_affinity(self, params: ModelParams, cfg: ModelConfig):
        if not cfg.learn_graph:
            return self.frozen_op
        if self.masked:
            return learn_S_masked(self.x, None, params.gl, self.support)
        return learn_S_dense(self.x, params.gl, cfg.dense_limit)

    def gl_term(self, s, cfg: ModelConfig):
        if not cfg.learn_graph or cfg.lambda2 <= 0:
            return None
        return gl_loss(self.x, s, self.graph, cfg.gl, self.dist2)


def _needs_ppmi(cfg: ModelConfig) -> bool:
    return cfg.lambda1 > 0 or cfg.supervise in ("p", "both")


def _refresh_due(epoch: int, every: int) -> bool:
    if epoch == 0:
        return True
    return every > 0 and epoch % every == 0


def _build_ppmi_operator(s, walk: WalkConfig, rng: RngStream) -> PropagationOperator:
    trans = s.matrix() if isinstance(s, LearnedGraph) else s.matrix
    try:
        freq = frequency_matrix(trans, walk, rng)
        return ppmi_operator(ppmi(freq))
    except ValueError as exc:
        raise DataError(f"PPMI construction failed: {exc}") from exc


def _eval_predictions(ctx: _GraphContext, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    s = ctx.build_affinity(params, cfg)
    cache = forward(ctx.x, s, None, params, cfg, mode="eval")
    return np.argmax(cache.za.value, axis=1)


def accuracy(pred, labels, mask) -> float:
    """Fraction of correct predictions over a non-empty node subset."""
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise DataError("accuracy over an empty mask")
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    return float((pred[idx] == labels[idx]).mean())


def predict(params: ModelParams, dataset) -> np.ndarray:
    """Class index per node from the supervised branch; ties break low."""
    cfg = _eval_config(params)
    ctx = _GraphContext(dataset.x, dataset.graph, cfg)
    return _eval_predictions(ctx, params, cfg)


def _eval_config(params: ModelParams) -> ModelConfig:
    """Minimal config for inference; widths come from the parameters."""
    return ModelConfig(
        hidden_gcn=max(1, params.w_a[0].value.shape[1]),
        depth=max(2, len(params.w_a)),
        share_weights=params.share_weights,
        learn_graph=params.gl is not None,
        lambda1=0.0,
        lambda2=0.0,
    )


def fit(dataset, cfg: ModelConfig, on_epoch=None) -> FitResult:
    """Full-batch training; returns the best-validation parameter snapshot.

    Per epoch: rebuild the learned affinity from the current parameters,
    refresh the PPMI operator on the configured schedule, take one Adam
    step (graph-learner group at lr1, convolution group at lr2), then
    score the validation set.  Aborts on a non-finite loss.
    """
    if not dataset.has_masks():
        raise DataError("dataset has no train/val/test masks; apply a split first")
    rng = RngStream(cfg.seed)
    x = dataset.x
    train_idx = np.flatnonzero(dataset.train_mask)
    val_idx = np.flatnonzero(dataset.val_mask)
    ctx = _GraphContext(x, dataset.graph, cfg)
    params = init_params(dataset.p, dataset.class_count, cfg, rng)
    gl_group = params.gl_parameters()
    conv_group = params.conv_parameters()
    gl_states = init_adam_states(gl_group)
    conv_states = init_adam_states(conv_group)
    need_p = _needs_ppmi(cfg)

    p_op = None
    refresh_idx = -1
    best_val = -1.0
    best_epoch = -1
    best_state = None
    last_val = float("nan")
    history: list[dict] = []
    epochs_run = 0

    for epoch in range(cfg.epochs):
        s = ctx.build_affinity(params, cfg)
        if need_p and _refresh_due(epoch, cfg.ppmi_refresh):
            refresh_idx += 1
            p_op = _build_ppmi_operator(s, cfg.walk, rng.child("ppmi", refresh_idx))
        cache = forward(x, s, p_op if need_p else None, params, cfg, "train", rng, epoch)
        gl_term = ctx.gl_term(s, cfg)
        loss, comps = total_loss(cache, dataset.y, train_idx, gl_term, cfg)
        if not np.isfinite(comps["total"]):
            raise NumericError(f"non-finite loss at epoch {epoch}: {comps}")
        tape.backward(loss)
        prev = params.state_dict() if cfg.stop_threshold > 0 else None
        if gl_group:
            adam_step(gl_group, gl_states, cfg.lr1, cfg.weight_decay)
        adam_step(conv_group, conv_states, cfg.lr2, cfg.weight_decay)
        epochs_run = epoch + 1

        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            pred = _eval_predictions(ctx, params, cfg)
            last_val = accuracy(pred, dataset.y, val_idx)
            # ties go to the later epoch: more training at equal validation
            if last_val >= best_val:
                best_val = last_val
                best_epoch = epoch
                best_state = params.state_dict()
        row = {
            "epoch": epoch,
            "train_loss": comps["total"],
            "l0": comps["l0"],
            "lreg": comps["lreg"],
            "lgl": comps["lgl"],
            "val_acc": last_val,
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if prev is not None:
            delta = max(np.abs(p.value - prev[p.name]).max() for p in params.all_parameters())
            if delta < cfg.stop_threshold:
                break

    if best_state is not None:
        params.load_state_dict(best_state)
    return FitResult(params=params, history=history, best_epoch=best_epoch,
                     best_val_acc=best_val, epochs_run=epochs_run)


# ---------------------------------------------------------------------------
# checkpoint container (versioned npz: meta json + parameter tensors)
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = 1


def save_checkpoint(path, params: ModelParams, cfg_echo: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "share_weights": params.share_weights,
        "layers": len(params.w_a),
        "has_gl": params.gl is not None,
        "has_proj": params.gl is not None and params.gl.proj is not None,
        "cfg": cfg_echo or {},
    }
    arrays = {f"param/{k}": v for k, v in params.state_dict().items()}
    np.savez(path, meta=json.dumps(meta, sort_keys=True), **arrays)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"unsupported checkpoint format: {meta.get('format')}")
        state = {k[len("param/"):]: archive[k] for k in archive.files if k.startswith("param/")}
    layers = meta["layers"]
    w_a = [Parameter(state[f"W.{layer}"], name=f"W.{layer}") for layer in range(layers)]
    if meta["share_weights"]:
        w_p = list(w_a)
    else:
        w_p = [Parameter(state[f"WP.{layer}"], name=f"WP.{layer}") for layer in range(layers)]
    gl = None
    if meta["has_gl"]:
        proj = Parameter(state["gl.proj"], name="gl.proj") if meta["has_proj"] else None
        gl = GraphLearnerParams(a=Parameter(state["gl.a"], name="gl.a"), proj=proj)
    params = ModelParams(gl=gl, w_a=w_a, w_p=w_p, share_weights=meta["share_weights"])
    return params, meta


def format_history_row(row: dict) -> str:
    vals = []
    for col in HISTORY_COLUMNS:
        v = row[col]
        vals.append(str(v) if isinstance(v, (int, np.integer)) else f"{v:.12g}")
    return ",".join(vals)
