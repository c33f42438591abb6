"""Mini-batch Adam training on the combined objective, plus the random epsilon sweep."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .adversary import AdvConfig, adversarial_objective
from .data import Instance, Vocabulary
from .evaluator import predict, task_metric
from .model import Batch, ModelConfig, ModelParameters, batch_from_ids, init_params

logger = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2_coefficient: float = 1e-5
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    adv: AdvConfig = field(default_factory=AdvConfig)
    early_stop_patience: int = 5
    clip_norm: float | None = 5.0
    task: str | None = None  # bc / qa / nli; inferred from the model when None
    freeze_embeddings: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.l2_coefficient < 0:
            raise ValueError("l2_coefficient must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adv"] = self.adv.to_dict()
        return d


def default_task(config: ModelConfig) -> str:
    return "bc" if config.task_kind == "single" else "qa"


# ---------------------------------------------------------------------- Adam

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParameters) -> "OptimizerState":
        return cls({k: np.zeros(t.shape) for k, t in params.items()},
                   {k: np.zeros(t.shape) for k, t in params.items()})


def adam_step(params: ModelParameters, grads: dict[str, np.ndarray], state: OptimizerState,
              config: TrainConfig, frozen: Sequence[str] = ()) -> None:
    """One in-place Adam update with L2 folded into the gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    missing = [k for k in params if k not in grads and k not in frozen]
    if missing:
        raise ValueError(f"no gradient for {', '.join(missing)}")
    state.t += 1
    lr = config.learning_rate
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name, tensor in params.items():
        if name in frozen:
            continue
        p = tensor.data
        g = grads[name]
        if config.l2_coefficient:
            g = g + config.l2_coefficient * p
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ------------------------------------------------------------------ training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_clean: float
    train_adv: float
    valid_metric: float
    wall_time: float
    degenerate: int = 0


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_valid: float | None = None

    def __len__(self) -> int:
        return len(self.records)


class EncodedSplit:
    """Token ids for a split, encoded once."""

    def __init__(self, instances: Sequence[Instance], vocab: Vocabulary):
        if not instances:
            raise ValueError("empty split")
        self.pair = instances[0].mode == "pair"
        self.ids = [vocab.encode(i.attended) for i in instances]
        self.q_ids = [vocab.encode(i.q_tokens) for i in instances] if self.pair else None
        self.labels = np.array([i.label for i in instances], dtype=np.int64)
        self.lengths = np.array([len(x) for x in self.ids])

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, rows: Sequence[int]) -> Batch:
        return batch_from_ids([self.ids[r] for r in rows], self.labels[list(rows)],
                              None if not self.pair else [self.q_ids[r] for r in rows])

    def batches(self, batch_size: int) -> list[Batch]:
        order = np.argsort(self.lengths, kind="stable")
        return [self.batch(order[i:i + batch_size]) for i in range(0, len(order), batch_size)]


def epoch_batches(n: int, lengths: np.ndarray, batch_size: int, rng: np.random.Generator,
                  pool: int = 50) -> list[np.ndarray]:
    """Shuffled batches; within pools of ``pool`` batches rows are grouped by length."""
    perm = rng.permutation(n)
    out = []
    span = batch_size * pool
    for start in range(0, n, span):
        chunk = perm[start:start + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        out.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def validation_metric(split: EncodedSplit, params: ModelParameters, config: ModelConfig,
                      task: str, batch_size: int = 128) -> float:
    preds = np.empty(len(split), dtype=np.int64)
    order = np.argsort(split.lengths, kind="stable")
    for i in range(0, len(order), batch_size):
        rows = order[i:i + batch_size]
        preds[rows] = predict(split.batch(rows), params, config)
    return task_metric(preds, split.labels, task)


def train(train_set: Sequence[Instance], valid_set: Sequence[Instance], vocab: Vocabulary,
          model_config: ModelConfig, train_config: TrainConfig,
          embedding: np.ndarray | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None,
          ) -> tuple[ModelParameters, TrainHistory]:
    """Train and return the parameters of the best validation epoch.

    The run is fully determined by ``train_config.seed``: it seeds the
    parameter initialisation, the per-epoch shuffles, and random
    perturbations, all drawn from a single generator.
    """
    if not train_set or not valid_set:
        raise ValueError("training and validation splits must be non-empty")
    rng = np.random.default_rng(train_config.seed)
    params = init_params(model_config, rng, embedding)
    history = TrainHistory()
    if train_config.epochs == 0:
        return params, history

    task = train_config.task or default_task(model_config)
    tr = EncodedSplit(train_set, vocab)
    va = EncodedSplit(valid_set, vocab)
    state = OptimizerState.zeros_like(params)
    frozen = ("embedding",) if train_config.freeze_embeddings else ()
    best_state = params.state()
    stale = 0
    adv = train_config.adv

    for epoch in range(1, train_config.epochs + 1):
        t0 = time.perf_counter()
        tot = clean = adv_sum = 0.0
        n_deg = 0
        for rows in epoch_batches(len(tr), tr.lengths, train_config.batch_size, rng):
            batch = tr.batch(rows)
            try:
                parts, grads = adversarial_objective(batch, params, model_config, adv, rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            if not math.isfinite(parts.total):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss {parts.total}")
            if train_config.clip_norm is not None:
                clip_global_norm(grads, train_config.clip_norm)
            for name in frozen:
                grads.pop(name, None)
            adam_step(params, grads, state, train_config, frozen)
            k = len(rows)
            tot += parts.total * k
            clean += parts.clean * k
            adv_sum += parts.adversarial * k
            n_deg += parts.degenerate
        metric = validation_metric(va, params, model_config, task)
        n = len(tr)
        rec = EpochRecord(epoch, tot / n, clean / n, adv_sum / n, metric,
                          time.perf_counter() - t0, n_deg)
        history.records.append(rec)
        logger.debug("epoch %d loss %.4f valid %.4f (%.1fs)", epoch, rec.train_loss, metric,
                    rec.wall_time)
        if on_epoch is not None:
            on_epoch(rec)
        if history.best_valid is None or metric > history.best_valid:
            history.best_valid = metric
            history.best_epoch = epoch
            best_state = params.state()
            stale = 0
        else:
            stale += 1
            if stale >= train_config.early_stop_patience:
                break

    params.load_state(best_state)
    return params, history


# --------------------------------------------------------------------- sweep

@dataclass
class SweepRow:
    epsilon: float
    valid_metric: float
    seed: int

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "valid_metric": self.valid_metric, "seed": self.seed}


def epsilon_sweep(train_set, valid_set, vocab: Vocabulary, model_config: ModelConfig,
                  base: TrainConfig, trials: int, eps_range: tuple[float, float],
                  rng: np.random.Generator, embedding: np.ndarray | None = None) -> list[SweepRow]:
    """Train ``trials`` times with epsilon drawn uniformly from ``eps_range``.

    Trial ``i`` uses seed ``base.seed + i``; rows come back sorted by epsilon.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lo, hi = eps_range
    if lo > hi:
        raise ValueError(f"empty epsilon range {lo}:{hi}")
    rows = []
    for i in range(trials):
        eps = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        cfg = replace(base, seed=base.seed + i, adv=replace(base.adv, epsilon=eps))
        _, hist = train(train_set, valid_set, vocab, model_config, cfg, embedding)
        rows.append(SweepRow(eps, float(hist.best_valid if hist.best_valid is not None else 0.0),
                             cfg.seed))
    return sorted(rows, key=lambda r: (r.epsilon, r.seed))
