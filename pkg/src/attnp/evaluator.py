"""Task metrics, gradient saliency, attention/saliency correlation and heatmaps."""

from __future__ import annotations

import html
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .data import Instance, Vocabulary
from .model import Batch, ModelConfig, ModelParameters, batch_from_ids, forward, predict_classes

METRIC_NAMES = {"bc": "f1", "qa": "accuracy", "nli": "micro_f1"}


# -------------------------------------------------------------------- metrics

def confusion_matrix(predictions, labels, n_classes: int | None = None) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    k = n_classes or int(max(p.max(initial=0), y.max(initial=0))) + 1
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


def task_metric(predictions, labels, task: str) -> float:
    """bc: F1 of class 1; qa: accuracy; nli: micro-averaged F1."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} predictions vs {y.shape} labels")
    if p.size == 0:
        raise ValueError("no predictions")
    if task == "qa":
        return float(np.mean(p == y))
    cm = confusion_matrix(p, y)
    if task == "bc":
        pos = 1
        if cm.shape[0] <= pos:
            return 0.0
        tp = cm[pos, pos]
        fp = cm[:, pos].sum() - tp
        fn = cm[pos, :].sum() - tp
        denom = 2 * tp + fp + fn
        return float(2 * tp / denom) if denom else 0.0
    if task == "nli":
        tp = np.trace(cm)
        fp = cm.sum(axis=0) - np.diag(cm)
        fn = cm.sum(axis=1) - np.diag(cm)
        denom = 2 * tp + fp.sum() + fn.sum()
        return float(2 * tp / denom) if denom else 0.0
    raise ValueError(f"unknown task {task!r}")


def per_class_scores(predictions, labels, n_classes: int) -> list[dict]:
    cm = confusion_matrix(predictions, labels, n_classes)
    rows = []
    for c in range(n_classes):
        tp = cm[c, c]
        pred_c = cm[:, c].sum()
        true_c = cm[c, :].sum()
        rows.append({"class": c,
                     "precision": float(tp / pred_c) if pred_c else 0.0,
                     "recall": float(tp / true_c) if true_c else 0.0,
                     "support": int(true_c)})
    return rows


# ------------------------------------------------------------------- saliency

@dataclass
class SaliencyMap:
    importance: np.ndarray  # (T,), sums to 1 over unmasked tokens unless degenerate
    degenerate: bool = False


def predict(batch: Batch, params: ModelParameters, config: ModelConfig) -> np.ndarray:
    return predict_classes(forward(batch, params, config).prediction.data)


def saliency_batch(batch: Batch, params: ModelParameters, config: ModelConfig):
    """Per-token gradient norms of the predicted-class output, normalised per row.

    Returns (importance (B, T), degenerate (B,), attention weights (B, T),
    predicted classes (B,)).
    """
    with Tape() as tape:
        out = forward(batch, params, config, watch_embedded=True)
        pred = out.prediction.data
        cls = predict_classes(pred)
        pick = np.zeros(pred.shape)
        pick[np.arange(len(cls)), cls] = 1.0
        target = ad.total(ad.mul(out.prediction, pick))
        g = backward(tape, target, wrt=[out.embedded])[out.embedded]
    norms = np.sqrt(np.sum(g * g, axis=-1)) * batch.mask
    sums = norms.sum(axis=1)
    degenerate = sums <= 0.0
    safe = np.where(degenerate, 1.0, sums)
    importance = np.where(degenerate[:, None], 0.0, norms / safe[:, None])
    return importance, degenerate, out.attention.weights.data, cls


def gradient_importance(batch: Batch, params: ModelParameters, config: ModelConfig) -> SaliencyMap:
    """Saliency for a one-instance batch."""
    if batch.size != 1:
        raise ValueError("gradient_importance expects a single-instance batch")
    imp, deg, _, _ = saliency_batch(batch, params, config)
    T = int(batch.mask[0].sum())
    return SaliencyMap(imp[0, :T], bool(deg[0]))


def pearson_correlation(a, s, mask=None) -> float | None:
    """Pearson correlation over unmasked positions; None when undefined."""
    a = np.asarray(a, dtype=np.float64)
    s = np.asarray(s.importance if isinstance(s, SaliencyMap) else s, dtype=np.float64)
    if a.shape != s.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {s.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        a, s = a[m], s[m]
    if a.size < 2:
        return None
    ac = a - a.mean()
    sc = s - s.mean()
    va = float(np.dot(ac, ac))
    vs = float(np.dot(sc, sc))
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(s))), 1e-300)
    if va <= (1e-12 * scale) ** 2 * a.size or vs <= (1e-12 * scale) ** 2 * s.size:
        return None
    r = float(np.dot(ac, sc) / np.sqrt(va * vs))
    return max(-1.0, min(1.0, r))


# ----------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    metric_name: str
    metric: float
    mean_correlation: float | None
    n_instances: int
    n_skipped: int
    per_class: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ATTNP_THREADS", "1")))
    except ValueError:
        return 1


def _eval_chunk(args):
    batch, params, config = args
    imp, deg, weights, cls = saliency_batch(batch, params, config)
    corrs = []
    for i in range(batch.size):
        c = None if deg[i] else pearson_correlation(weights[i], imp[i], batch.mask[i])
        corrs.append(c)
    return cls, corrs


def evaluate(instances: Sequence[Instance], params: ModelParameters, config: ModelConfig,
             vocab: Vocabulary, task: str, batch_size: int = 64,
             threads: int | None = None) -> EvalReport:
    """Task metric plus mean per-instance attention/saliency correlation.

    Instances whose correlation is undefined are skipped and counted.
    Batches may be processed on ``ATTNP_THREADS`` threads; the reduction
    is always in instance order.
    """
    if not instances:
        raise ValueError("cannot evaluate an empty split")
    pair = instances[0].mode == "pair"
    ids = [vocab.encode(i.attended) for i in instances]
    q_ids = [vocab.encode(i.q_tokens) for i in instances] if pair else None
    labels = np.array([i.label for i in instances], dtype=np.int64)
    chunks = []
    for start in range(0, len(instances), batch_size):
        rows = range(start, min(start + batch_size, len(instances)))
        b = batch_from_ids([ids[r] for r in rows], labels[list(rows)],
                           None if q_ids is None else [q_ids[r] for r in rows])
        chunks.append((b, params, config))
    n_threads = threads or _threads()
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(_eval_chunk, chunks))
    else:
        results = [_eval_chunk(c) for c in chunks]
    preds = np.concatenate([r[0] for r in results])
    corrs = [c for r in results for c in r[1]]
    valid = [c for c in corrs if c is not None]
    mean_corr = float(np.mean(valid)) if valid else None
    return EvalReport(METRIC_NAMES[task], task_metric(preds, labels, task), mean_corr,
                      len(instances), len(corrs) - len(valid),
                      per_class_scores(preds, labels, config.label_count))


# -------------------------------------------------------------------- heatmap

def _shade(values: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, None)
    top = v.max() if v.size else 0.0
    return v / top if top > 0 else np.zeros_like(v)


def render_heatmap(tokens: Sequence[str], attention, saliency, title: str = "attention") -> str:
    """Standalone HTML page with an attention row and a saliency row.

    Cell opacity is proportional to the weight, with the largest weight
    fully opaque.
    """
    a = np.asarray(attention, dtype=np.float64)
    s = np.asarray(saliency.importance if isinstance(saliency, SaliencyMap) else saliency,
                   dtype=np.float64)
    if not (len(tokens) == len(a) == len(s)):
        raise ValueError("tokens, attention and saliency must have equal length")
    rows = []
    for label, vals, rgb in (("attention", a, "220, 50, 47"), ("saliency", s, "38, 139, 210")):
        cells = []
        for tok, op, raw in zip(tokens, _shade(vals), vals):
            cells.append(f'<span class="tok" title="{raw:.4f}" '
                         f'style="background-color: rgba({rgb}, {op:.4f})">'
                         f"{html.escape(tok)}</span>")
        rows.append(f'<div class="row"><span class="label">{label}</span>{" ".join(cells)}</div>')
    body = "\n".join(rows)
    return ("<!DOCTYPE html>\n"
            '<html lang="en">\n<head>\n<meta charset="utf-8" />\n'
            f"<title>{html.escape(title)}</title>\n"
            "<style>.row{margin:0.6em 0;line-height:2em}.label{display:inline-block;"
            "width:6em;font-weight:bold}.tok{padding:0.15em 0.25em;border-radius:3px}</style>\n"
            f"</head>\n<body>\n{body}\n</body>\n</html>\n")


def render_terminal(tokens: Sequence[str], attention, saliency) -> str:
    """Two lines of tokens on 256-colour grey-ramp backgrounds."""
    s = saliency.importance if isinstance(saliency, SaliencyMap) else saliency
    lines = []
    for label, vals in (("attention", attention), ("saliency", s)):
        parts = []
        for tok, op in zip(tokens, _shade(np.asarray(vals))):
            shade = 232 + int(round(op * 23))
            fg = 16 if op > 0.5 else 255
            parts.append(f"\x1b[48;5;{shade}m\x1b[38;5;{fg}m{tok}\x1b[0m")
        lines.append(f"{label:>9} " + " ".join(parts))
    return "\n".join(lines)
