"""Command-line entry point.

    attnp gen-data --task 1 --out data/
    attnp train --config run.cfg --method attention_iat --epsilon 5 --out runs/iat
    attnp evaluate --checkpoint runs/iat/checkpoint --data data/task1 --out runs/iat
    attnp sweep-epsilon --config run.cfg --trials 4 --range 1:30 --out runs/sweep
    attnp render-attention --checkpoint runs/iat/checkpoint --data data/task1.test.jsonl \
        --index 3 --out runs/iat/heatmaps/3.html

Configuration files are flat ``key = value`` lines with ``#`` comments.
Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .adversary import METHODS, AdvConfig
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (DatasetError, build_vocab, generate_babi_like, load_dataset, load_embeddings,
                   load_splits, split_paths, write_dataset)
from .evaluator import evaluate, gradient_importance, render_heatmap
from .model import ModelConfig, make_batch
from .trainer import TrainConfig, epsilon_sweep, train

logger = logging.getLogger("attnp")


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_str(text: str):
    return None if text.strip().lower() in ("", "none") else text.strip()


# key -> (parser, default)
CONFIG_KEYS = {
    "data": (str, None),
    "mode": (str, "pair"),
    "n_classes": (_opt_int, None),
    "task": (_opt_str, None),
    "embeddings": (_opt_str, None),
    "freeze_embeddings": (_bool, False),
    "vocab_min_count": (_opt_int, None),  # None: 1 for generated data, 2 otherwise
    "embed_dim": (int, 50),
    "hidden_dim": (int, 64),
    "attn_dim": (_opt_int, None),
    "method": (str, "vanilla"),
    "epsilon": (float, 1.0),
    "lambda": (float, 1.0),
    "learning_rate": (float, 1e-3),
    "l2_coefficient": (float, 1e-5),
    "epochs": (int, 40),
    "batch_size": (int, 32),
    "early_stop_patience": (int, 5),
    "clip_norm": (_opt_float, 5.0),
    "seed": (int, 0),
}


def read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def resolve_config(file_values: dict[str, str], overrides: dict[str, str]) -> dict:
    """Merge file values with flag overrides and parse every key.

    Raises UsageError naming every unknown or malformed key.
    """
    raw = {k: v for k, v in file_values.items()}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    bad = []
    unknown = sorted(k for k in raw if k not in CONFIG_KEYS)
    if unknown:
        bad.extend(f"{k} (unknown key)" for k in unknown)
    cfg = {}
    for key, (parse, default) in CONFIG_KEYS.items():
        if key in raw:
            try:
                cfg[key] = parse(str(raw[key]))
            except ValueError as exc:
                bad.append(f"{key} ({exc})")
        else:
            cfg[key] = default
    if not bad:
        if cfg["method"] not in METHODS:
            bad.append(f"method (must be one of {', '.join(METHODS)})")
        if cfg["mode"] not in ("single", "pair"):
            bad.append("mode (must be single or pair)")
        if cfg["task"] not in (None, "bc", "qa", "nli"):
            bad.append("task (must be bc, qa or nli)")
        if cfg["epsilon"] < 0:
            bad.append("epsilon (must be >= 0)")
        for key in ("epochs", "batch_size", "hidden_dim", "embed_dim", "early_stop_patience"):
            if cfg[key] < (0 if key == "epochs" else 1):
                bad.append(f"{key} (out of range)")
        if cfg["hidden_dim"] % 2:
            bad.append("hidden_dim (must be even)")
        if not cfg["learning_rate"] > 0:
            bad.append("learning_rate (must be > 0)")
        if cfg["data"] is None:
            bad.append("data (required: dataset path prefix)")
    if bad:
        raise UsageError("invalid configuration: " + "; ".join(bad))
    cfg["_explicit"] = sorted(raw)
    return cfg


def echo_config(cfg: dict, path: Path) -> None:
    lines = ["# resolved configuration"]
    for key in CONFIG_KEYS:
        lines.append(f"{key} = {cfg[key]}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    keys = ("data", "mode", "method", "epsilon", "lam", "epochs", "seed", "hidden_dim",
            "embed_dim", "batch_size", "learning_rate", "embeddings", "task")
    out = {}
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            out["lambda" if key == "lam" else key] = str(val)
    return out


def _build(cfg: dict):
    """Load data, vocabulary, embeddings and configs for a train/sweep run."""
    paths = split_paths(cfg["data"])
    missing = [str(p) for s, p in paths.items() if not p.exists()]
    if missing:
        raise UsageError("missing dataset file(s): " + ", ".join(missing))
    splits = load_splits(cfg["data"], cfg["mode"], cfg["n_classes"])
    min_count = cfg["vocab_min_count"]
    if min_count is None:
        min_count = 1 if Path(f"{cfg['data']}.meta.json").exists() else 2
        cfg["vocab_min_count"] = min_count
    vocab = build_vocab(splits["train"], min_count)
    n_classes = cfg["n_classes"]
    if n_classes is None:
        n_classes = 1 + max(i.label for s in splits.values() for i in s)
        if cfg["mode"] == "single":
            n_classes = max(n_classes, 2)
    embedding = None
    embed_dim = cfg["embed_dim"]
    if cfg["embeddings"]:
        table, embedding = load_embeddings(cfg["embeddings"], vocab, seed=cfg["seed"])
        embed_dim = table.dim
    model_config = ModelConfig(len(vocab), n_classes, embed_dim, cfg["hidden_dim"],
                               cfg["attn_dim"], "single" if cfg["mode"] == "single" else "pair")
    method = cfg["method"]
    adv = AdvConfig(method, cfg["epsilon"] if method != "vanilla" else 0.0, cfg["lambda"])
    train_config = TrainConfig(cfg["learning_rate"], cfg["l2_coefficient"], cfg["epochs"],
                               cfg["batch_size"], cfg["seed"], adv, cfg["early_stop_patience"],
                               cfg["clip_norm"], cfg["task"], cfg["freeze_embeddings"])
    return splits, vocab, embedding, model_config, train_config


def _warn_vanilla(cfg: dict) -> None:
    if cfg["method"] == "vanilla" and "epsilon" in cfg["_explicit"]:
        logger.warning("method vanilla ignores epsilon=%s", cfg["epsilon"])


def _prepare_out(out: str | None, default: str) -> Path:
    path = Path(out or default)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    try:
        sizes = tuple(int(s) for s in args.sizes.split(","))
    except ValueError:
        raise UsageError(f"--sizes must be three comma-separated integers, got {args.sizes!r}")
    if len(sizes) != 3 or min(sizes) < 1:
        raise UsageError("--sizes needs three positive integers")
    out = _prepare_out(args.out, "data")
    seed = args.seed if args.seed is not None else 0
    splits = generate_babi_like(args.task, sizes, seed)
    prefix = out / f"task{args.task}"
    total = 0
    for name, items in zip(("train", "valid", "test"), splits):
        total += write_dataset(split_paths(prefix)[name], items)
    meta = {"generator": "babi-like", "task": args.task, "sizes": list(sizes), "seed": seed}
    Path(f"{prefix}.meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
    vocab = build_vocab(splits[0])
    print(f"task {args.task}: train {sizes[0]}, valid {sizes[1]}, test {sizes[2]} "
          f"({total} instances), vocab {len(vocab)}, prefix {prefix}")
    return 0


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    cfg = resolve_config(file_values, _overrides(args))
    _warn_vanilla(cfg)
    splits, vocab, embedding, model_config, train_config = _build(cfg)
    out = _prepare_out(args.out, "run")
    (out / "heatmaps").mkdir(exist_ok=True)
    echo_config(cfg, out / "config.echo")

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as log:
        def on_epoch(rec):
            # wall time goes to the logger only, so the log is reproducible
            row = {"epoch": rec.epoch, "train_loss": rec.train_loss,
                   "train_clean": rec.train_clean, "train_adv": rec.train_adv,
                   "valid_metric": rec.valid_metric, "degenerate": rec.degenerate}
            log.write(json.dumps(row) + "\n")
            log.flush()
            logger.info("epoch %d: loss %.4f, valid %.4f, %.1fs", rec.epoch, rec.train_loss,
                        rec.valid_metric, rec.wall_time)

        params, history = train(splits["train"], splits["valid"], vocab, model_config,
                                train_config, embedding, on_epoch)
    save_checkpoint(str(out / "checkpoint"), params, model_config, vocab,
                    train_config.to_dict())
    task = train_config.task or ("bc" if model_config.task_kind == "single" else "qa")
    report = evaluate(splits["test"], params, model_config, vocab, task)
    payload = report.to_dict()
    payload.update(split="test", best_epoch=history.best_epoch, best_valid=history.best_valid)
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    corr = "n/a" if report.mean_correlation is None else f"{report.mean_correlation:.4f}"
    print(f"test {report.metric_name} {report.metric:.4f}, correlation {corr}, "
          f"best epoch {history.best_epoch}; outputs in {out}")
    return 0


def _load_eval_split(data: str, mode: str, split: str, n_classes=None):
    path = Path(data)
    if not path.exists():
        path = split_paths(data)[split]
    if not path.exists():
        raise UsageError(f"missing dataset file: {path}")
    return load_dataset(path, mode, n_classes)


def cmd_evaluate(args) -> int:
    params, model_config, vocab, train_echo = load_checkpoint(args.checkpoint)
    mode = "single" if model_config.task_kind == "single" else "pair"
    instances = _load_eval_split(args.data, mode, args.split, model_config.label_count)
    task = args.task or train_echo.get("task") or ("bc" if mode == "single" else "qa")
    report = evaluate(instances, params, model_config, vocab, task)
    out = _prepare_out(args.out, ".")
    payload = report.to_dict()
    payload["split"] = args.split
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(report.to_json())
    return 0


def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--range must look like lo:hi, got {text!r}") from None
    if lo < 0 or lo > hi:
        raise UsageError(f"--range needs 0 <= lo <= hi, got {text!r}")
    return lo, hi


def cmd_sweep(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    eps_range = _parse_range(args.range)
    file_values = read_config_file(args.config) if args.config else {}
    cfg = resolve_config(file_values, _overrides(args))
    if cfg["method"] == "vanilla":
        raise UsageError("sweep-epsilon needs a perturbation method, not vanilla")
    splits, vocab, embedding, model_config, train_config = _build(cfg)
    out = _prepare_out(args.out, "sweep")
    echo_config(cfg, out / "config.echo")
    rng = np.random.default_rng(cfg["seed"])
    rows = epsilon_sweep(splits["train"], splits["valid"], vocab, model_config, train_config,
                         args.trials, eps_range, rng, embedding)
    with open(out / "sweep.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_dict()) + "\n")
    for row in rows:
        print(f"epsilon {row.epsilon:8.4f}  seed {row.seed}  valid {row.valid_metric:.4f}")
    return 0


def cmd_render(args) -> int:
    params, model_config, vocab, _ = load_checkpoint(args.checkpoint)
    mode = "single" if model_config.task_kind == "single" else "pair"
    instances = _load_eval_split(args.data, mode, args.split, model_config.label_count)
    if not 0 <= args.index < len(instances):
        raise UsageError(f"--index {args.index} out of range (dataset has {len(instances)})")
    inst = instances[args.index]
    batch = make_batch([inst], vocab)
    from .model import forward
    weights = forward(batch, params, model_config).attention.weights.data[0]
    sal = gradient_importance(batch, params, model_config)
    tokens = list(inst.attended)[: len(sal.importance)]
    weights = weights[: len(tokens)]
    page = render_heatmap(tokens, weights, sal, title=f"instance {args.index}")
    out = Path(args.out) if args.out else Path("heatmaps") / f"{args.index}.html"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(page, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc.strerror}") from None
    print(f"{'token':<16}{'attention':>12}{'saliency':>12}")
    for tok, a, s in zip(tokens, weights, sal.importance):
        print(f"{tok:<16}{a:12.6f}{s:12.6f}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (file for render-attention)")
    common.add_argument("-v", "--verbose", action="store_true")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--data", help="dataset prefix; reads PREFIX.{train,valid,test}.jsonl")
    run.add_argument("--mode", choices=("single", "pair"))
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--epsilon", type=float)
    run.add_argument("--lambda", dest="lam", type=float)
    run.add_argument("--epochs", type=int)
    run.add_argument("--batch-size", dest="batch_size", type=int)
    run.add_argument("--learning-rate", dest="learning_rate", type=float)
    run.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    run.add_argument("--embed-dim", dest="embed_dim", type=int)
    run.add_argument("--embeddings", help="text embedding file")
    run.add_argument("--task", choices=("bc", "qa", "nli"))

    parser = argparse.ArgumentParser(prog="attnp", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic QA splits")
    p.add_argument("--task", type=int, default=1, choices=(1, 2, 3))
    p.add_argument("--sizes", default="8500,1500,1000", help="train,valid,test counts")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common, run], help="train one model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file or split prefix")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--task", choices=("bc", "qa", "nli"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-epsilon", parents=[common, run], help="random epsilon sweep")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--range", default="0:30", help="epsilon range lo:hi")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render-attention", parents=[common], help="attention/saliency heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file or split prefix")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"attnp {args.command}: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, OSError, ValueError) as exc:
        print(f"attnp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
