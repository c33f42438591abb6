"""BiLSTM encoder + additive attention + dense decoder, single and pair variants.

All computations are batched over a padded (B, T) block; padded positions
carry a zero mask, get no attention mass and never change LSTM state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PAD_ID, Instance, Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    label_count: int
    embed_dim: int = 50
    hidden_dim: int = 64  # both directions together
    attn_dim: int | None = None
    task_kind: str = "single"
    output_activation: str | None = None

    def __post_init__(self):
        if self.attn_dim is None:
            object.__setattr__(self, "attn_dim", max(1, self.hidden_dim // 2))
        if self.output_activation is None:
            act = "sigmoid" if self.task_kind == "single" else "softmax"
            object.__setattr__(self, "output_activation", act)
        if self.task_kind not in ("single", "pair"):
            raise ValueError(f"task_kind must be 'single' or 'pair', got {self.task_kind!r}")
        if self.output_activation not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown output_activation {self.output_activation!r}")
        for name in ("vocab_size", "label_count", "embed_dim", "hidden_dim", "attn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even (split across two directions)")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ModelParameters:
    """Named trainable tensors.

    Encoder names are ``<enc>.<fwd|bwd>.<w_x|w_h|b>`` with ``enc`` one of
    ``enc`` (single) or ``enc_p`` / ``enc_q`` (pair).  Attention uses
    ``attn.W`` (d' x m) or ``attn.W1`` / ``attn.W2``, plus ``attn.b`` and
    ``attn.c``; the decoder is ``dec.W`` (|y| x m) and ``dec.b``.
    """

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def copy(self) -> "ModelParameters":
        return ModelParameters({k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                for k, v in self._tensors.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self._tensors[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self._tensors[k].shape} vs {v.shape}")
            self._tensors[k].data[...] = v

    def check(self, config: ModelConfig) -> None:
        for name, shape in expected_shapes(config).items():
            if name not in self._tensors:
                raise ValueError(f"missing parameter {name}")
            t = self._tensors[name]
            if t.shape != shape:
                raise ValueError(f"parameter {name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"parameter {name} has non-finite values")

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParameters":
        return cls({k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                    for k, v in arrays.items()})


def _encoders(config: ModelConfig) -> tuple[str, ...]:
    return ("enc",) if config.task_kind == "single" else ("enc_p", "enc_q")


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m, da, y = config.embed_dim, config.hidden_dim, config.attn_dim, config.label_count
    h = m // 2
    shapes: dict[str, tuple[int, ...]] = {"embedding": (config.vocab_size, d)}
    for enc in _encoders(config):
        for direction in ("fwd", "bwd"):
            shapes[f"{enc}.{direction}.w_x"] = (d, 4 * h)
            shapes[f"{enc}.{direction}.w_h"] = (h, 4 * h)
            shapes[f"{enc}.{direction}.b"] = (4 * h,)
    if config.task_kind == "single":
        shapes["attn.W"] = (da, m)
    else:
        shapes["attn.W1"] = (da, m)
        shapes["attn.W2"] = (da, m)
    shapes["attn.b"] = (da,)
    shapes["attn.c"] = (da,)
    shapes["dec.W"] = (y, m)
    shapes["dec.b"] = (y,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator,
                embedding: np.ndarray | None = None) -> ModelParameters:
    """Seeded initialisation: uniform +-1/sqrt(fan_in), forget-gate bias 1, embeddings N(0, 1)."""
    arrays: dict[str, np.ndarray] = {}
    h = config.hidden_dim // 2
    for name, shape in expected_shapes(config).items():
        if name == "embedding":
            if embedding is not None:
                if embedding.shape != shape:
                    raise ValueError(f"embedding shape {embedding.shape} != {shape}")
                arr = np.array(embedding, dtype=np.float64)
            else:
                arr = rng.standard_normal(shape)
            arr[PAD_ID] = 0.0
        elif name.endswith(".b"):
            arr = np.zeros(shape)
            if name.startswith("enc"):
                arr[h:2 * h] = 1.0
        elif name == "attn.c":
            arr = _uniform(rng, shape, shape[0])
        else:
            arr = _uniform(rng, shape, shape[-1] if name.startswith(("attn", "dec")) else shape[0])
        arrays[name] = arr
    return ModelParameters.from_arrays(arrays)


# ----------------------------------------------------------------- batching

@dataclass
class Batch:
    """Padded id blocks for a list of instances."""

    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    q_ids: np.ndarray | None = None
    q_mask: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def subset(self, rows) -> "Batch":
        return Batch(self.ids[rows], self.mask[rows], self.labels[rows],
                     None if self.q_ids is None else self.q_ids[rows],
                     None if self.q_mask is None else self.q_mask[rows])

    def repeat(self, n: int) -> "Batch":
        """The single instance of this batch repeated ``n`` times."""
        return self.subset(np.zeros(n, dtype=np.int64))


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def make_batch(instances: Sequence[Instance], vocab: Vocabulary) -> Batch:
    if not instances:
        raise ValueError("empty batch")
    labels = np.array([inst.label for inst in instances], dtype=np.int64)
    if instances[0].mode == "pair":
        ids, mask = _pad([vocab.encode(i.p_tokens) for i in instances])
        q_ids, q_mask = _pad([vocab.encode(i.q_tokens) for i in instances])
        return Batch(ids, mask, labels, q_ids, q_mask)
    ids, mask = _pad([vocab.encode(i.tokens) for i in instances])
    return Batch(ids, mask, labels)


def batch_from_ids(ids: Sequence[Sequence[int]], labels: Sequence[int],
                   q_ids: Sequence[Sequence[int]] | None = None) -> Batch:
    p, pm = _pad(ids)
    if q_ids is None:
        return Batch(p, pm, np.asarray(labels, dtype=np.int64))
    q, qm = _pad(q_ids)
    return Batch(p, pm, np.asarray(labels, dtype=np.int64), q, qm)


# ------------------------------------------------------------------ forward

@dataclass
class AttentionState:
    scores: Tensor   # (B, T) pre-softmax, after any perturbation
    weights: Tensor  # (B, T)
    mask: np.ndarray  # (B, T) bool
    clean_scores: Tensor | None = None


@dataclass
class ForwardOutput:
    prediction: Tensor  # (B, |y|)
    attention: AttentionState
    hidden: Tensor  # (B, T, m)
    context: Tensor  # (B, m)
    embedded: Tensor  # (B, T, d), perturbation included
    extras: dict = field(default_factory=dict)


def embed(token_ids, params: ModelParameters) -> Tensor:
    """Look up embedding rows; the padding id yields zero rows."""
    return ad.embedding_lookup(params["embedding"], np.asarray(token_ids), padding_idx=PAD_ID)


def encode(embeddings: Tensor, params: ModelParameters, which: str = "enc",
           mask: np.ndarray | None = None) -> Tensor:
    """BiLSTM over (B, T, d) or (T, d) embeddings; returns (B, T, m) or (T, m)."""
    squeeze = embeddings.ndim == 2
    x = ad.reshape(embeddings, (1,) + embeddings.shape) if squeeze else embeddings
    if x.shape[1] < 1:
        raise ValueError("cannot encode an empty sequence")
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    if f"{which}.fwd.w_x" not in params:
        raise ValueError(f"no encoder named {which!r} in parameters")
    if params[f"{which}.fwd.w_x"].shape[0] != x.shape[2]:
        raise ValueError(f"embedding width {x.shape[2]} does not match encoder input "
                         f"{params[f'{which}.fwd.w_x'].shape[0]}")
    fwd = ad.lstm(x, mask, params[f"{which}.fwd.w_x"], params[f"{which}.fwd.w_h"],
                  params[f"{which}.fwd.b"], reverse=False)
    bwd = ad.lstm(x, mask, params[f"{which}.bwd.w_x"], params[f"{which}.bwd.w_h"],
                  params[f"{which}.bwd.b"], reverse=True)
    h = ad.concat([fwd, bwd], axis=-1)
    return ad.reshape(h, h.shape[1:]) if squeeze else h


def attention_scores_single(hidden: Tensor, params: ModelParameters) -> Tensor:
    """Additive scores ``c . tanh(W h_t + b)`` for every position."""
    proj = ad.matmul(hidden, ad.transpose(params["attn.W"]))
    return ad.matmul(ad.tanh(ad.add(proj, params["attn.b"])), params["attn.c"])


def attention_scores_pair(hidden_p: Tensor, q_final: Tensor, params: ModelParameters) -> Tensor:
    """Scores ``c . tanh(W1 h_t + W2 q + b)`` over the paragraph.

    ``hidden_p`` is (B, T, m) with ``q_final`` (B, m), or (T, m) with (m,).
    """
    if hidden_p.shape[-1] != q_final.shape[-1] or hidden_p.ndim != q_final.ndim + 1:
        raise ValueError(f"shape mismatch: hidden {hidden_p.shape}, query {q_final.shape}")
    proj = ad.matmul(hidden_p, ad.transpose(params["attn.W1"]))
    qproj = ad.matmul(q_final, ad.transpose(params["attn.W2"]))
    qproj = ad.reshape(qproj, qproj.shape[:-1] + (1, qproj.shape[-1]))
    pre = ad.add(ad.add(proj, qproj), params["attn.b"])
    return ad.matmul(ad.tanh(pre), params["attn.c"])


def encode_batch(batch: Batch, params: ModelParameters, config: ModelConfig,
                 embed_perturbation=None, watch_embedded: bool = False):
    """Embedding + encoders.  Returns (embedded, hidden, q_final)."""
    emb = embed(batch.ids, params)
    if watch_embedded:
        tape = ad.current_tape()
        if tape is not None:
            tape.watch(emb)
    x = emb
    if embed_perturbation is not None:
        r = ad.as_tensor(embed_perturbation)
        if r.shape != emb.shape:
            raise ValueError(f"embedding perturbation shape {r.shape} != {emb.shape}")
        x = ad.add(emb, ad.mul(r, batch.mask[..., None].astype(np.float64)))
    if config.task_kind == "single":
        return x, encode(x, params, "enc", batch.mask), None
    if batch.q_ids is None:
        raise ValueError("pair model needs question ids")
    hidden = encode(x, params, "enc_p", batch.mask)
    hq = encode(embed(batch.q_ids, params), params, "enc_q", batch.q_mask)
    last = batch.q_mask.sum(axis=1) - 1
    q_final = ad.getitem(hq, (np.arange(batch.size), last))
    return x, hidden, q_final


def scores_for(hidden: Tensor, q_final: Tensor | None, params: ModelParameters,
               config: ModelConfig) -> Tensor:
    if config.task_kind == "single":
        return attention_scores_single(hidden, params)
    return attention_scores_pair(hidden, q_final, params)


def decode_from_scores(scores: Tensor, hidden: Tensor, mask: np.ndarray, params: ModelParameters,
                       config: ModelConfig, score_perturbation=None):
    """Softmax pooling and decoding from (possibly perturbed) scores.

    Returns (perturbed scores, weights, context, prediction).
    """
    s = scores
    if score_perturbation is not None:
        r = ad.as_tensor(score_perturbation)
        if r.shape != scores.shape:
            raise ValueError(f"perturbation length {r.shape} does not match scores {scores.shape}")
        s = ad.add(scores, ad.mul(r, mask.astype(np.float64)))
    weights = ad.softmax(s, mask)
    B, T = weights.shape
    pooled = ad.matmul(ad.reshape(weights, (B, 1, T)), hidden)
    context = ad.reshape(pooled, (B, hidden.shape[-1]))
    logits = ad.add(ad.matmul(context, ad.transpose(params["dec.W"])), params["dec.b"])
    if config.output_activation == "sigmoid":
        pred = ad.sigmoid(logits)
    else:
        pred = ad.softmax(logits)
    return s, weights, context, pred


def forward(batch: Batch, params: ModelParameters, config: ModelConfig,
            score_perturbation=None, embed_perturbation=None,
            watch_scores: bool = False, watch_embedded: bool = False) -> ForwardOutput:
    """Full pass; optional perturbations are added to the scores or the embeddings."""
    emb, hidden, q_final = encode_batch(batch, params, config, embed_perturbation, watch_embedded)
    clean = scores_for(hidden, q_final, params, config)
    if watch_scores:
        tape = ad.current_tape()
        if tape is not None:
            tape.watch(clean)
    s, weights, context, pred = decode_from_scores(clean, hidden, batch.mask, params, config,
                                                   score_perturbation)
    return ForwardOutput(pred, AttentionState(s, weights, batch.mask, clean), hidden, context, emb,
                         {"q_final": q_final})


def predict_classes(prediction: np.ndarray) -> np.ndarray:
    """Argmax with ties to the lowest index."""
    return np.argmax(prediction, axis=-1)
