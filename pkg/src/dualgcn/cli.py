"""Batch command line: train, eval, gradcheck, ppmi, partition.

Config precedence is built-in defaults < per-dataset profile < config
file < command-line flags; unknown keys are hard errors and the fully
merged config is echoed into summary.json.  Exit codes: 0 success,
2 config error, 3 data error, 4 numeric failure, 5 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .cluster import (
    PartitionConfig,
    cluster_fit,
    edge_cut_report,
    partition_graph,
    random_balanced_partition,
    save_partition_cache,
)
from .data import SplitSpec, resolve_dataset, with_split
from .errors import ConfigError, DataError, NumericError
from .graph import build_graph
from .model import (
    ModelConfig,
    accuracy,
    fit,
    forward,
    format_history_row,
    HISTORY_COLUMNS,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    total_loss,
    _GraphContext,
    _build_ppmi_operator,
)
from .optim import finite_diff_check
from .ppmi import WalkConfig, frequency_matrix, ppmi, save_ppmi_cache
from .rng import RngStream
from . import tape
from .graphlearn import GlConfig

_EXIT_OK = 0
_EXIT_CONFIG = 2
_EXIT_DATA = 3
_EXIT_NUMERIC = 4
_EXIT_GRADCHECK = 5


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_opt_int(s: str):
    return None if s.strip().lower() in ("none", "null") else int(s)


_KEY_PARSERS = {
    "hidden_gcn": int,
    "hidden_gl": _parse_opt_int,
    "depth": int,
    "share_weights": _parse_bool,
    "supervise": str,
    "lambda1": float,
    "lambda2": float,
    "dropout": float,
    "lr1": float,
    "lr2": float,
    "weight_decay": float,
    "epochs": int,
    "ppmi_refresh": int,
    "ce_reduction": str,
    "agreement_mean": _parse_bool,
    "learn_graph": _parse_bool,
    "stop_threshold": float,
    "dense_limit": int,
    "eval_every": int,
    "init": str,
    "walk_q": int,
    "walk_w": int,
    "walk_gamma": int,
    "gl_gamma": float,
    "gl_beta": float,
    "split_per_class": int,
    "split_val": int,
    "split_test": int,
    "split_seed": int,
    "cluster_c": int,
    "cluster_q": int,
    "cluster_balance": float,
    "cluster_seed": int,
    "cluster_weighted": _parse_bool,
    "seed": int,
    "threads": int,
}

_DEFAULTS = {
    "hidden_gcn": 16,
    "hidden_gl": 200,
    "depth": 2,
    "share_weights": True,
    "supervise": "a",
    "lambda1": 0.01,
    "lambda2": 0.01,
    "dropout": 0.6,
    "lr1": 0.005,
    "lr2": 0.005,
    "weight_decay": 5e-3,
    "epochs": 1000,
    "ppmi_refresh": 25,
    "ce_reduction": "sum",
    "agreement_mean": True,
    "learn_graph": True,
    "stop_threshold": 0.0,
    "dense_limit": 20000,
    "eval_every": 1,
    "init": "glorot",
    "walk_q": 3,
    "walk_w": 3,
    "walk_gamma": 10,
    "gl_gamma": 0.01,
    "gl_beta": 0.1,
    "split_per_class": 20,
    "split_val": 500,
    "split_test": 1000,
    "split_seed": 0,
    "cluster_balance": 1.1,
    "cluster_weighted": True,
    "seed": 0,
    "threads": 0,
}

# dataset-specific defaults, applied on top of the globals above
_PROFILES = {
    "cora": {},
    "pubmed": {},
    "citeseer": {"hidden_gcn": 30, "lr2": 0.001},
    "karate": {
        "hidden_gl": None,
        "epochs": 500,
        "dropout": 0.1,
        "weight_decay": 5e-4,
        "lr2": 0.01,
        "lambda1": 1.0,
        "supervise": "both",
        "walk_q": 5,
        "walk_w": 5,
        "walk_gamma": 20,
        "ppmi_refresh": 10,
    },
}


def _parse_kv(token: str) -> tuple[str, str]:
    if "=" not in token:
        raise ConfigError(f"expected key=value, got {token!r}")
    k, v = token.split("=", 1)
    return k.strip(), v.strip()


def read_config_file(path) -> dict:
    """Flat "key = value" text; '#' comments and blank lines ignored."""
    raw = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
    return raw


def merge_config(dataset_name: str | None, file_cfg: dict, overrides: dict) -> dict:
    """Typed, validated merge; unknown keys are hard errors."""
    merged = dict(_DEFAULTS)
    if dataset_name in _PROFILES:
        merged.update(_PROFILES[dataset_name])
    for source in (file_cfg, overrides):
        for key, value in source.items():
            if key not in _KEY_PARSERS:
                raise ConfigError(f"unknown config key: {key!r}")
            merged[key] = _KEY_PARSERS[key](value) if isinstance(value, str) else value
    return merged


def model_config_from(merged: dict) -> ModelConfig:
    return ModelConfig(
        hidden_gcn=merged["hidden_gcn"],
        hidden_gl=merged["hidden_gl"],
        depth=merged["depth"],
        share_weights=merged["share_weights"],
        supervise=merged["supervise"],
        lambda1=merged["lambda1"],
        lambda2=merged["lambda2"],
        dropout=merged["dropout"],
        lr1=merged["lr1"],
        lr2=merged["lr2"],
        weight_decay=merged["weight_decay"],
        epochs=merged["epochs"],
        seed=merged["seed"],
        ppmi_refresh=merged["ppmi_refresh"],
        walk=WalkConfig(q=merged["walk_q"], w=merged["walk_w"],
                        gamma_walks=merged["walk_gamma"], seed=merged["seed"]),
        gl=GlConfig(gamma_reg=merged["gl_gamma"], beta=merged["gl_beta"]),
        ce_reduction=merged["ce_reduction"],
        agreement_mean=merged["agreement_mean"],
        learn_graph=merged["learn_graph"],
        stop_threshold=merged["stop_threshold"],
        dense_limit=merged["dense_limit"],
        eval_every=merged["eval_every"],
        init=merged["init"],
    )


_thread_controller = None


def _limit_threads(k: int) -> int:
    """Cap BLAS parallelism; recorded for reproducibility."""
    global _thread_controller
    if k and k > 0:
        try:
            from threadpoolctl import threadpool_limits

            _thread_controller = threadpool_limits(limits=k)
        except ImportError:
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(k)
        return k
    return 0


def _write_summary(out_dir, summary: dict) -> str:
    path = os.path.join(out_dir, "summary.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return path


def _ensure_masks(bundle, merged: dict):
    if bundle.has_masks():
        return bundle
    spec = SplitSpec(
        per_class_train=merged["split_per_class"],
        val_size=merged["split_val"],
        test_size=merged["split_test"],
        seed=merged["split_seed"],
    )
    return with_split(bundle, spec)


def cmd_train(args) -> int:
    t0 = time.time()
    file_cfg = read_config_file(args.config) if args.config else {}
    overrides = dict(_parse_kv(t) for t in args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    cluster_overrides = dict(_parse_kv(t) for t in args.cluster or [])
    for k, v in cluster_overrides.items():
        overrides[f"cluster_{k}"] = v
    dataset_name = args.dataset if args.dataset in _PROFILES or args.dataset == "karate" else os.path.basename(
        os.path.normpath(args.dataset))
    merged = merge_config(dataset_name, file_cfg, overrides)
    threads = _limit_threads(merged["threads"])
    bundle = resolve_dataset(args.dataset, args.data_dir)
    bundle = _ensure_masks(bundle, merged)
    cfg = model_config_from(merged)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    history_path = os.path.join(out_dir, "history.csv")
    checkpoint_path = os.path.join(out_dir, "checkpoint.npz")

    history_fh = open(history_path, "w", encoding="utf-8")
    history_fh.write(",".join(HISTORY_COLUMNS) + "\n")

    def on_epoch(row):
        history_fh.write(format_history_row(row) + "\n")
        history_fh.flush()

    use_cluster = args.cluster is not None or "cluster_c" in merged
    if use_cluster and "cluster_c" not in merged:
        history_fh.close()
        raise ConfigError("cluster training requires c (e.g. --cluster c=10 q=2)")
    try:
        if use_cluster:
            part_cfg = PartitionConfig(
                c=merged["cluster_c"],
                q=merged.get("cluster_q", 1),
                balance_tolerance=merged["cluster_balance"],
                seed=merged.get("cluster_seed", merged["seed"]),
            )
            result = cluster_fit(bundle, cfg, part_cfg,
                                 weighted_loss=merged["cluster_weighted"], on_epoch=on_epoch)
        else:
            result = fit(bundle, cfg, on_epoch=on_epoch)
    finally:
        history_fh.close()

    pred = predict(result.params, bundle)
    test_acc = accuracy(pred, bundle.y, bundle.test_mask)
    save_checkpoint(checkpoint_path, result.params, cfg_echo=_jsonable(merged))
    final_loss = result.history[-1]["train_loss"] if result.history else float("nan")
    summary = {
        "command": "train",
        "dataset": bundle.name,
        "n": bundle.n,
        "classes": bundle.class_count,
        "seed": merged["seed"],
        "threads": threads,
        "config": _jsonable(merged),
        "cluster_mode": use_cluster,
        "best_val_acc": result.best_val_acc,
        "best_epoch": result.best_epoch,
        "test_acc": test_acc,
        "final_train_loss": final_loss,
        "epochs_run": result.epochs_run,
        "skipped_batches": result.skipped_batches,
        "artifacts": {"history": history_path, "checkpoint": checkpoint_path},
        "wall_time_sec": round(time.time() - t0, 3),
    }
    _write_summary(out_dir, summary)
    print(f"test_acc={test_acc:.4f} best_val_acc={result.best_val_acc:.4f} "
          f"best_epoch={result.best_epoch} epochs={result.epochs_run}")
    return _EXIT_OK


def _jsonable(merged: dict) -> dict:
    return {k: merged[k] for k in sorted(merged)}


def cmd_eval(args) -> int:
    t0 = time.time()
    params, meta = load_checkpoint(args.checkpoint)
    merged = merge_config(None, {}, {})
    bundle = resolve_dataset(args.dataset, args.data_dir)
    bundle = _ensure_masks(bundle, merged)
    pred = predict(params, bundle)
    out = {
        "command": "eval",
        "dataset": bundle.name,
        "checkpoint": args.checkpoint,
        "n": bundle.n,
        "classes": bundle.class_count,
        "train_acc": accuracy(pred, bundle.y, bundle.train_mask),
        "val_acc": accuracy(pred, bundle.y, bundle.val_mask),
        "test_acc": accuracy(pred, bundle.y, bundle.test_mask),
        "wall_time_sec": round(time.time() - t0, 3),
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_summary(args.out, out)
    print(json.dumps(out, sort_keys=True))
    return _EXIT_OK


def _gradcheck_instance(seed: int, merged: dict):
    """Small deterministic instance: 8 nodes, 5 features, 3 classes."""
    rng = RngStream(seed, ("gradcheck",))
    n, p, k = 8, 5, 3
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    chosen = [pairs[i] for i in np.flatnonzero(rng.child("edges").random(len(pairs)) < 0.45)]
    chosen += [(i, (i + 1) % n) for i in range(n)]  # ring keeps it connected
    g = build_graph(sorted(set(chosen)), n)
    x = rng.child("features").random((n, p))
    y = rng.child("labels").integers(0, k, n).astype(np.int64)
    train_idx = np.arange(0, n, 2)
    return g, x, y, train_idx


def cmd_gradcheck(args) -> int:
    file_cfg = read_config_file(args.config) if args.config else {}
    overrides = dict(_parse_kv(t) for t in args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    merged = merge_config(None, file_cfg, overrides)
    merged.update({"dropout": 0.0, "hidden_gcn": 4, "hidden_gl": 3, "epochs": 1})
    # without the graph-learning loss the learner layer is disabled: the
    # affinity is pinned to the normalized adjacency and the group skipped
    if merged["lambda2"] == 0.0:
        merged["learn_graph"] = False
    cfg = model_config_from(merged)
    g, x, y, train_idx = _gradcheck_instance(merged["seed"], merged)
    rng = RngStream(merged["seed"])
    params = init_params(x.shape[1], 3, cfg, rng)
    if params.gl is not None:
        # a random scorer can land every pair below the ReLU hinge, which
        # zeroes the learner gradients; shift into the active region so the
        # group is genuinely exercised
        params.gl.a.value[...] = np.abs(params.gl.a.value) + 0.05
    ctx = _GraphContext(x, g, cfg)
    s0 = ctx.build_affinity(params, cfg)
    p_op = _build_ppmi_operator(s0, cfg.walk, rng.child("ppmi", 0)) if cfg.lambda1 > 0 else None

    def loss_fn():
        s = ctx.build_affinity(params, cfg)
        cache = forward(x, s, p_op, params, cfg, mode="eval")
        loss, _ = total_loss(cache, y, train_idx, ctx.gl_term(s, cfg), cfg)
        return loss

    groups = {"graph-learner": params.gl_parameters(), "convolution": params.conv_parameters()}
    all_ok = True
    for name, group in groups.items():
        if not group:
            print(f"{name}: no-grad, skipped")
            continue
        fn = loss_fn
        if args.sabotage == name:
            fn = _sabotaged(loss_fn, group[0])
        report = finite_diff_check(fn, group, h=1e-5, tolerance=1e-4)
        worst = max(entry["max_rel_err"] for entry in report.values())
        passed = all(entry["passed"] for entry in report.values())
        skipped = all(entry["status"].startswith("no-grad") for entry in report.values())
        if skipped:
            print(f"{name}: no-grad, skipped")
            continue
        print(f"{name}: max_rel_err={worst:.3e} {'PASS' if passed else 'FAIL'}")
        all_ok &= passed
    return _EXIT_OK if all_ok else _EXIT_GRADCHECK


def _sabotaged(loss_fn, param):
    """Test hook: leak a parameter into the loss value outside the tape,
    so finite differences see a slope the analytic gradient lacks."""

    def fn():
        t = loss_fn()
        shift = 0.5 * float(param.value.ravel()[0])
        return tape.Tensor(t.value + shift, (t,), lambda g: (g,))

    return fn


def cmd_ppmi(args) -> int:
    bundle = resolve_dataset(args.dataset, args.data_dir)
    if bundle.graph is None:
        raise DataError("ppmi requires a dataset with a graph")
    walk = WalkConfig(q=args.q, w=args.w, gamma_walks=args.gamma, seed=args.seed)
    freq = frequency_matrix(bundle.graph.adj, walk)
    try:
        p = ppmi(freq)
    except ValueError as exc:
        raise DataError(str(exc))
    out_path = args.out or f"{bundle.name}_ppmi.tsv"
    save_ppmi_cache(out_path, p, walk)
    max_entry = float(p.P.data.max()) if p.P.nnz else 0.0
    print(f"nnz={p.P.nnz} max={max_entry:.6g} file={out_path}")
    return _EXIT_OK


def cmd_partition(args) -> int:
    bundle = resolve_dataset(args.dataset, args.data_dir)
    if bundle.graph is None:
        raise DataError("partition requires a dataset with a graph")
    part_cfg = PartitionConfig(c=args.c, q=1, seed=args.seed,
                               balance_tolerance=args.balance)
    part = partition_graph(bundle.graph, part_cfg)
    report = edge_cut_report(part)
    baseline_rng = RngStream(args.seed, ("partition-baseline",))
    cuts = [random_balanced_partition(bundle.graph, args.c, baseline_rng.child(i)).edge_cut
            for i in range(20)]
    report["random_baseline_mean_cut"] = float(np.mean(cuts))
    report["n"] = bundle.n
    report["c"] = args.c
    report["seed"] = args.seed
    out_path = args.out or f"{bundle.name}_partition.txt"
    save_partition_cache(out_path, part, args.seed)
    report["file"] = out_path
    print(json.dumps(report, sort_keys=True))
    return _EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualgcn",
                                     description="dual-branch graph convolution trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--dataset", required=True, help="builtin name, directory, or name under GLDGCN_DATA_DIR")
        p.add_argument("--data-dir", default=None, help="dataset root (overrides GLDGCN_DATA_DIR)")

    p_train = sub.add_parser("train", help="train a model and write artifacts")
    add_common(p_train)
    p_train.add_argument("--config", default=None, help="flat key = value config file")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p_train.add_argument("--cluster", nargs="+", metavar="KEY=VALUE",
                         help="cluster-training options, e.g. c=10 q=2")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--threads", type=int, default=None)
    p_train.add_argument("--out", default=None, help="artifact directory (default: cwd)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a dataset")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p_grad.add_argument("--config", default=None)
    p_grad.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_grad.add_argument("--seed", type=int, default=None)
    p_grad.add_argument("--sabotage", default=None, help=argparse.SUPPRESS)  # test hook
    p_grad.set_defaults(func=cmd_gradcheck)

    p_ppmi = sub.add_parser("ppmi", help="compute and cache the PPMI matrix of a dataset graph")
    add_common(p_ppmi)
    p_ppmi.add_argument("--q", type=int, default=3)
    p_ppmi.add_argument("--w", type=int, default=3)
    p_ppmi.add_argument("--gamma", type=int, default=10)
    p_ppmi.add_argument("--seed", type=int, default=0)
    p_ppmi.add_argument("--out", default=None)
    p_ppmi.set_defaults(func=cmd_ppmi)

    p_part = sub.add_parser("partition", help="partition a dataset graph and report the cut")
    add_common(p_part)
    p_part.add_argument("--c", type=int, required=True)
    p_part.add_argument("--seed", type=int, default=0)
    p_part.add_argument("--balance", type=float, default=1.1)
    p_part.add_argument("--out", default=None)
    p_part.set_defaults(func=cmd_partition)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return _EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return _EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
