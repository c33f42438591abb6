"""Perturbations for the six training techniques and the combined adversarial objective.

Every builder works on a whole :class:`~attnp.model.Batch` and normalises
per instance: row ``i`` of a perturbation only depends on instance ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .model import (Batch, ModelConfig, ModelParameters, decode_from_scores, encode_batch,
                    forward, scores_for)

METHODS = ("vanilla", "word_at", "word_iat", "attention_rp", "attention_at", "attention_iat")
WORD_IAT_MAX_VOCAB = 4096
_DEGENERATE = 1e-12
_CLAMP = 1e-12


@dataclass(frozen=True)
class AdvConfig:
    method: str = "vanilla"
    epsilon: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.epsilon < 0 or self.lam < 0:
            raise ValueError("epsilon and lambda must be non-negative")

    @property
    def adversarial(self) -> bool:
        return self.method != "vanilla"

    def to_dict(self) -> dict:
        return {"method": self.method, "epsilon": self.epsilon, "lambda": self.lam}


@dataclass
class Perturbation:
    target: str  # "attention_scores" or "word_embeddings"
    values: np.ndarray  # (B, T) or (B, T, d)
    degenerate: np.ndarray  # (B,) bool


# ---------------------------------------------------------------------- loss

def nll_loss(prediction: Tensor, labels, config: ModelConfig) -> Tensor:
    """Per-instance negative log likelihood, shape (B,).

    Softmax heads use ``-log p[label]``; sigmoid heads sum the binary
    cross-entropy of every component against the one-hot label.
    Probabilities are clamped to [1e-12, 1 - 1e-12] first.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_out = prediction.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_out):
        raise ValueError(f"label out of range for {n_out} outputs")
    p = ad.clip(prediction, _CLAMP, 1.0 - _CLAMP)
    onehot = np.zeros(prediction.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    if config.output_activation == "softmax":
        return ad.scale(ad.total(ad.mul(ad.log(p), onehot), axis=-1), -1.0)
    pos = ad.mul(ad.log(p), onehot)
    neg = ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - onehot)
    return ad.scale(ad.total(ad.add(pos, neg), axis=-1), -1.0)


# ------------------------------------------------------------- normalisation

def _row_normalise(g: np.ndarray, mask: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """``eps * g / ||g||`` per leading row over masked-in entries."""
    g = g * mask
    norms = np.sqrt(np.sum((g * g).reshape(g.shape[0], -1), axis=1))
    degenerate = norms < _DEGENERATE
    safe = np.where(degenerate, 1.0, norms)
    shape = (-1,) + (1,) * (g.ndim - 1)
    r = np.where(degenerate.reshape(shape), 0.0, eps * g / safe.reshape(shape))
    return r, degenerate


def fast_gradient(g: np.ndarray, eps: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Single-instance ``eps * g / ||g||_2``; zero when the gradient vanishes."""
    g = np.asarray(g, dtype=np.float64)
    m = np.ones(g.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    r, _ = _row_normalise(g[None], m[None], eps)
    return r[0]


def difference_vectors(scores, mask=None) -> np.ndarray:
    """Normalised score differences ``d~_t[k] = (s_t - s_k) / ||d_t||``.

    ``scores`` is (T,) or (B, T); the result adds a trailing T axis.  Masked
    rows and columns are zero, and rows with no spread are the zero vector.
    """
    s = np.asarray(scores, dtype=np.float64)
    single = s.ndim == 1
    if single:
        s = s[None]
    m = np.ones(s.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(s.shape)
    pair = m[:, :, None] & m[:, None, :]
    d = np.where(pair, s[:, :, None] - s[:, None, :], 0.0)
    norms = np.sqrt(np.sum(d * d, axis=-1, keepdims=True))
    out = np.where(norms < _DEGENERATE, 0.0, d / np.where(norms < _DEGENERATE, 1.0, norms))
    return out[0] if single else out


def raw_difference_vectors(scores, mask=None) -> np.ndarray:
    """Unnormalised ``d_t[k] = s_t - s_k`` (masked entries zero)."""
    s = np.asarray(scores, dtype=np.float64)
    m = np.ones(s.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    pair = m[..., :, None] & m[..., None, :]
    return np.where(pair, s[..., :, None] - s[..., None, :], 0.0)


def apply_difference_coefficients(alpha: np.ndarray, dtilde: np.ndarray) -> np.ndarray:
    """``r_t = alpha_t . d~_t`` for every position."""
    return np.sum(alpha * dtilde, axis=-1)


# ------------------------------------------------------ attention-score side

def attention_at_perturbation(batch: Batch, params: ModelParameters, config: ModelConfig,
                              eps: float) -> Perturbation:
    """Fast-gradient perturbation of the attention scores."""
    with Tape() as tape:
        out = forward(batch, params, config)
        clean = out.attention.clean_scores
        loss = nll_loss(out.prediction, batch.labels, config)
        g = backward(tape, ad.total(loss), wrt=[clean])[clean]
    r, deg = _row_normalise(g, batch.mask, eps)
    return Perturbation("attention_scores", r, deg)


def attention_iat_perturbation(batch: Batch, params: ModelParameters, config: ModelConfig,
                               eps: float) -> Perturbation:
    """Worst-case combination of normalised score differences.

    The coefficients start at zero, so the pass that yields their gradient
    is the clean pass.  Their Frobenius norm is bounded by ``eps``.
    """
    with Tape() as tape:
        emb, hidden, q_final = encode_batch(batch, params, config)
        clean = scores_for(hidden, q_final, params, config)
        dtilde = difference_vectors(clean.data, batch.mask)
        alpha = Tensor(np.zeros(dtilde.shape), requires_grad=True)
        tape.watch(alpha)
        r_alpha = ad.total(ad.mul(alpha, dtilde), axis=-1)
        _, _, _, pred = decode_from_scores(clean, hidden, batch.mask, params, config, r_alpha)
        loss = nll_loss(pred, batch.labels, config)
        g = backward(tape, ad.total(loss), wrt=[alpha])[alpha]
    alpha_star, deg = _row_normalise(g, batch.mask[:, :, None] & batch.mask[:, None, :], eps)
    r = apply_difference_coefficients(alpha_star, dtilde) * batch.mask
    return Perturbation("attention_scores", r, deg)


def attention_rp_perturbation(T, mask, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Random direction over the unmasked coordinates, scaled to norm ``eps``.

    ``T`` may be an int (single instance) or a (B, T) shape; no random
    numbers are drawn when ``eps`` is 0.
    """
    shape = (T,) if np.isscalar(T) else tuple(T)
    m = np.ones(shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(shape)
    if eps == 0:
        return np.zeros(shape)
    z = rng.standard_normal(shape)
    if len(shape) == 1:
        return fast_gradient(z, eps, m)
    r, _ = _row_normalise(z, m, eps)
    return r


# ------------------------------------------------------------ embedding side

def word_at_perturbation(batch: Batch, params: ModelParameters, config: ModelConfig,
                         eps: float) -> Perturbation:
    """Fast-gradient perturbation of the embedded sequence (Frobenius norm per instance)."""
    with Tape() as tape:
        out = forward(batch, params, config, watch_embedded=True)
        loss = nll_loss(out.prediction, batch.labels, config)
        g = backward(tape, ad.total(loss), wrt=[out.embedded])[out.embedded]
    r, deg = _row_normalise(g, batch.mask[..., None], eps)
    return Perturbation("word_embeddings", r, deg)


def word_directions(batch: Batch, params: ModelParameters) -> np.ndarray:
    """Unit vectors from each token embedding towards every vocabulary word.

    Shape (B, T, |V|, d); the padding row and coincident words give zero
    directions, as do padded positions.
    """
    table = params["embedding"].data
    V = table.shape[0]
    if V > WORD_IAT_MAX_VOCAB:
        raise ValueError(f"word_iat needs |V| <= {WORD_IAT_MAX_VOCAB} (got {V}); "
                         "use an attention-based method for large vocabularies")
    w = table[batch.ids] * batch.mask[..., None]
    diff = table[None, None, :, :] - w[:, :, None, :]
    norms = np.sqrt(np.sum(diff * diff, axis=-1, keepdims=True))
    ok = norms >= _DEGENERATE
    dirs = np.where(ok, diff / np.where(ok, norms, 1.0), 0.0)
    dirs[:, :, 0, :] = 0.0  # padding row is not a word
    return dirs * batch.mask[:, :, None, None]


def word_iat_perturbation(batch: Batch, params: ModelParameters, config: ModelConfig,
                          eps: float) -> Perturbation:
    """Embedding perturbation restricted to directions towards vocabulary words."""
    dirs = word_directions(batch, params)
    B, T, V, d = dirs.shape
    with Tape() as tape:
        alpha = Tensor(np.zeros((B * T, 1, V)), requires_grad=True)
        tape.watch(alpha)
        r_alpha = ad.reshape(ad.matmul(alpha, dirs.reshape(B * T, V, d)), (B, T, d))
        out = forward(batch, params, config, embed_perturbation=r_alpha)
        loss = nll_loss(out.prediction, batch.labels, config)
        g = backward(tape, ad.total(loss), wrt=[alpha])[alpha]
    return _word_iat_from_alpha_grad(g.reshape(B, T, V), dirs, batch.mask, eps)


def _word_iat_from_alpha_grad(g_alpha, dirs, mask, eps) -> Perturbation:
    alpha_star, deg = _row_normalise(g_alpha, mask[:, :, None], eps)
    r = np.einsum("btv,btvd->btd", alpha_star, dirs)
    return Perturbation("word_embeddings", r, deg)


# ----------------------------------------------------------------- objective

@dataclass
class ObjectiveParts:
    """Batch-mean clean loss, batch-mean adversarial loss, and their combination."""

    clean: float
    adversarial: float
    lam: float
    total: float
    degenerate: int = 0


def _param_grads(gm, params: ModelParameters) -> dict[str, np.ndarray]:
    return {name: gm[t] for name, t in params.items()}


def adversarial_objective(batch: Batch, params: ModelParameters, config: ModelConfig,
                          adv: AdvConfig, rng: np.random.Generator | None = None,
                          with_grads: bool = True):
    """Mean over the batch of ``L(clean) + lam * L(perturbed)`` and its parameter gradient.

    Perturbations are built against the current parameters and then held
    constant.  For the attention-score methods the encoder pass is shared
    between the clean and perturbed terms, which is exact because the
    perturbation enters after the encoder.
    """
    B = batch.size
    method = adv.method
    eps, lam = float(adv.epsilon), float(adv.lam)

    if method in ("vanilla", "attention_rp", "attention_at", "attention_iat"):
        with Tape() as tape:
            emb, hidden, q_final = encode_batch(batch, params, config)
            clean = scores_for(hidden, q_final, params, config)
            dtilde = alpha = r_alpha = None
            if method == "attention_iat":
                dtilde = difference_vectors(clean.data, batch.mask)
                alpha = Tensor(np.zeros(dtilde.shape), requires_grad=True)
                tape.watch(alpha)
                r_alpha = ad.total(ad.mul(alpha, dtilde), axis=-1)
            _, _, _, pred = decode_from_scores(clean, hidden, batch.mask, params, config, r_alpha)
            clean_vec = nll_loss(pred, batch.labels, config)
            clean_sum = ad.total(clean_vec)
            objective = clean_sum
            adv_value = 0.0
            n_deg = 0
            if method != "vanilla":
                if method == "attention_rp":
                    r = attention_rp_perturbation(batch.mask.shape, batch.mask, eps, rng)
                elif method == "attention_at":
                    if eps == 0:
                        r = np.zeros(batch.mask.shape)
                    else:
                        g = backward(tape, clean_sum, wrt=[clean])[clean]
                        r, deg = _row_normalise(g, batch.mask, eps)
                        n_deg = int(deg.sum())
                else:
                    if eps == 0:
                        r = np.zeros(batch.mask.shape)
                    else:
                        g = backward(tape, clean_sum, wrt=[alpha])[alpha]
                        pair = batch.mask[:, :, None] & batch.mask[:, None, :]
                        alpha_star, deg = _row_normalise(g, pair, eps)
                        r = apply_difference_coefficients(alpha_star, dtilde) * batch.mask
                        n_deg = int(deg.sum())
                _, _, _, pred_adv = decode_from_scores(clean, hidden, batch.mask, params, config, r)
                adv_sum = ad.total(nll_loss(pred_adv, batch.labels, config))
                adv_value = adv_sum.item() / B
                objective = ad.add(clean_sum, ad.scale(adv_sum, lam))
            objective = ad.scale(objective, 1.0 / B)
            grads = _param_grads(backward(tape, objective), params) if with_grads else None
        clean_value = clean_sum.item() / B
        parts = ObjectiveParts(clean_value, adv_value, lam, clean_value + lam * adv_value
                               if method != "vanilla" else clean_value, n_deg)
        return parts, grads

    # word-embedding methods: the perturbation sits before the encoder, so two passes
    with Tape() as tape:
        out = forward(batch, params, config, watch_embedded=True)
        clean_sum = ad.total(nll_loss(out.prediction, batch.labels, config))
        gm = backward(tape, ad.scale(clean_sum, 1.0 / B))
    grads = _param_grads(gm, params) if with_grads else None
    n_deg = 0
    if eps == 0:
        r = np.zeros(out.embedded.shape)
    elif method == "word_at":
        r, deg = _row_normalise(gm[out.embedded] * B, batch.mask[..., None], eps)
        n_deg = int(deg.sum())
    else:
        # d loss / d alpha at alpha = 0 is the embedding gradient projected on each direction
        dirs = word_directions(batch, params)
        g_alpha = np.einsum("btd,btvd->btv", gm[out.embedded] * B, dirs)
        pert = _word_iat_from_alpha_grad(g_alpha, dirs, batch.mask, eps)
        r, n_deg = pert.values, int(pert.degenerate.sum())
    with Tape() as tape:
        out_adv = forward(batch, params, config, embed_perturbation=r)
        adv_sum = ad.total(nll_loss(out_adv.prediction, batch.labels, config))
        if with_grads:
            gm_adv = backward(tape, ad.scale(adv_sum, lam / B))
            for name, t in params.items():
                grads[name] = grads[name] + gm_adv[t]
    clean_value, adv_value = clean_sum.item() / B, adv_sum.item() / B
    return ObjectiveParts(clean_value, adv_value, lam, clean_value + lam * adv_value, n_deg), grads


def adversarial_loss(batch: Batch, params: ModelParameters, config: ModelConfig, adv: AdvConfig,
                     rng: np.random.Generator | None = None) -> float:
    """Value of the combined objective (no gradients)."""
    parts, _ = adversarial_objective(batch, params, config, adv, rng, with_grads=False)
    return parts.total


def perturbed_loss(batch: Batch, params: ModelParameters, config: ModelConfig,
                   score_perturbation=None, embed_perturbation=None) -> np.ndarray:
    """Per-instance loss under a fixed perturbation, without recording a tape."""
    out = forward(batch, params, config, score_perturbation=score_perturbation,
                  embed_perturbation=embed_perturbation)
    return nll_loss(out.prediction, batch.labels, config).data
