"""Differentiable kernels.

Each function computes its forward value with numpy and registers a local
gradient rule on the active tape.  Elementwise binary ops follow numpy
broadcasting; the rules sum gradients back to the operand shapes.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result
from .. import _kernels


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics (vectors allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ValueError("matmul needs at least 1-d operands")

    def grad_fn(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bd.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result(ad @ bd, (a, b), grad_fn)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_result(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise FloatingPointError("log of non-positive value")
    return make_result(np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def total(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis`` (all axes by default)."""
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn)


def l2_norm(a: Tensor, axis=None) -> Tensor:
    x = a.data
    n = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * x / safe, 0.0),)

    out = n.reshape(()) if axis is None else np.squeeze(n, axis=axis)
    return make_result(out, (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return make_result(np.swapaxes(a.data, -1, -2), (a,),
                       lambda g: (np.ascontiguousarray(np.swapaxes(g, -1, -2)),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def getitem(a: Tensor, index) -> Tensor:
    """Slicing / fancy indexing; repeated indices accumulate gradients."""
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_result(np.array(a.data[index], dtype=np.float64), (a,), grad_fn)


def embedding_lookup(table: Tensor, ids: np.ndarray, padding_idx: int | None = 0) -> Tensor:
    """Row lookup ``table[ids]``; the padding row reads as zeros and gets no gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids.max() if ids.max() >= n else ids.min())
        raise IndexError(f"token id {bad} out of range for vocabulary of size {n}")
    out = table.data[ids]
    keep = None
    if padding_idx is not None:
        keep = (ids != padding_idx)[..., None]
        out = out * keep

    def grad_fn(g):
        gt = np.zeros(table.shape)
        if keep is not None:
            g = g * keep
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_result(out, (table,), grad_fn)


def softmax(v: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked-out entries are excluded and exactly 0."""
    x = v.data
    if x.shape[-1] == 0:
        raise ValueError("softmax of empty input")
    if mask is None:
        valid = np.ones(x.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not valid.any(axis=-1).all():
            raise ValueError("softmax: no valid positions")
    shifted = np.where(valid, x, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(np.where(valid, shifted, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return make_result(y, (v,), grad_fn)


def lstm(x: Tensor, mask: np.ndarray, w_x: Tensor, w_h: Tensor, bias: Tensor,
         reverse: bool = False) -> Tensor:
    """One LSTM direction over a padded batch.

    ``x`` is (B, T, D), ``mask`` (B, T) with 1 for real tokens.  At masked
    steps the state is carried through unchanged, so padding at the end of
    a sequence never leaks into the reverse direction.  Returns (B, T, H).
    """
    if x.ndim != 3:
        raise ValueError(f"lstm input must be (B, T, D), got {x.shape}")
    if w_x.shape[0] != x.shape[2] or w_h.shape[1] != 4 * w_h.shape[0] or w_x.shape[1] != w_h.shape[1]:
        raise ValueError(f"lstm weight shapes {w_x.shape}, {w_h.shape} do not fit input {x.shape}")
    m = np.ascontiguousarray(np.asarray(mask, dtype=np.float64).reshape(x.shape[:2]))
    hs, cache = _kernels.lstm_forward(x.data, m, w_x.data, w_h.data, bias.data, reverse)

    def grad_fn(g):
        return _kernels.lstm_backward(np.ascontiguousarray(g), x.data, m, w_x.data, w_h.data,
                                      cache, reverse)

    return make_result(hs, (x, w_x, w_h, bias), grad_fn)
