"""Pure-numpy LSTM kernels; the reference the compiled core must match."""

import numpy as np


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_forward(x, mask, w_x, w_h, bias, reverse):
    """Returns hidden states (B, T, H) and the cache needed by the backward pass.

    Gate layout along the 4H axis is input, forget, output, candidate.
    """
    B, T, _ = x.shape
    H = w_h.shape[0]
    proj = x @ w_x + bias  # (B, T, 4H)
    gates = np.empty((B, T, 4 * H))
    c_prev = np.empty((B, T, H))
    h_prev = np.empty((B, T, H))
    tanh_c = np.empty((B, T, H))
    hs = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = proj[:, t] + h @ w_h
        ifo = _sigmoid(z[:, :3 * H])
        g = np.tanh(z[:, 3 * H:])
        gates[:, t, :3 * H] = ifo
        gates[:, t, 3 * H:] = g
        c_prev[:, t] = c
        h_prev[:, t] = h
        cn = ifo[:, H:2 * H] * c + ifo[:, :H] * g
        tc = np.tanh(cn)
        tanh_c[:, t] = tc
        hn = ifo[:, 2 * H:] * tc
        m = mask[:, t, None]
        c = m * cn + (1.0 - m) * c
        h = m * hn + (1.0 - m) * h
        hs[:, t] = h
    return hs, (gates, c_prev, h_prev, tanh_c)


def lstm_backward(dhs, x, mask, w_x, w_h, cache, reverse):
    """Gradients with respect to (x, w_x, w_h, bias)."""
    gates, c_prev, h_prev, tanh_c = cache
    B, T, _ = x.shape
    H = w_h.shape[0]
    dz_all = np.zeros((B, T, 4 * H))
    dw_h = np.zeros_like(w_h)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        m = mask[:, t, None]
        dh = dh + dhs[:, t]
        i = gates[:, t, :H]
        f = gates[:, t, H:2 * H]
        o = gates[:, t, 2 * H:3 * H]
        g = gates[:, t, 3 * H:]
        tc = tanh_c[:, t]
        dhn = m * dh
        dcn = m * dc + dhn * o * (1.0 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :H] = dcn * g * i * (1.0 - i)
        dz[:, H:2 * H] = dcn * c_prev[:, t] * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dhn * tc * o * (1.0 - o)
        dz[:, 3 * H:] = dcn * i * (1.0 - g * g)
        dw_h += h_prev[:, t].T @ dz
        dh = (1.0 - m) * dh + dz @ w_h.T
        dc = (1.0 - m) * dc + dcn * f
    flat = dz_all.reshape(B * T, 4 * H)
    dx = (flat @ w_x.T).reshape(x.shape)
    dw_x = x.reshape(B * T, -1).T @ flat
    db = flat.sum(axis=0)
    return dx, dw_x, dw_h, db
