"""Pure-numpy sequence kernels: LSTM recurrence and streaming attention.

Reference implementation of the hot paths; the compiled module in
``_kernels.pyx`` exposes the same functions with the same contracts.
Gate layout along the 4H axis is (input, forget, cell, output).

The input and recurrent projections are fused into one product per step
against the concatenated weight matrix [W_ih | W_hh].  One fixed-shape
product per timestep keeps every BLAS call independent of how the
sequence was split, which guarantees bit-exact state carry-over across
chunk boundaries.
"""

import numpy as np
from scipy.special import expit

NAME = "numpy"


def lstm_forward(x, w_ih, w_hh, b, h0, c0, want_cache):
    """Run an LSTM over a batch of sequences.

    x: [B, T, I], w_ih: [4H, I], w_hh: [4H, H], b: [4H], h0/c0: [B, H].
    Returns (out [B, T, H], hT, cT, cache) where cache is
    (acts [B, T, 4H] post-activation gates, cs [B, T, H] cell states)
    or None when want_cache is false.
    """
    B, T, I = x.shape
    H = w_hh.shape[1]
    out = np.empty((B, T, H), dtype=x.dtype)
    acts = np.empty((B, T, 4 * H), dtype=x.dtype) if want_cache else None
    cs = np.empty((B, T, H), dtype=x.dtype) if want_cache else None
    h = h0.copy()
    c = c0.copy()
    w_cat_t = np.ascontiguousarray(np.concatenate((w_ih, w_hh), axis=1).T)
    xh = np.empty((B, I + H), dtype=x.dtype)
    for t in range(T):
        xh[:, :I] = x[:, t]
        xh[:, I:] = h
        gates = xh @ w_cat_t + b
        i = expit(gates[:, :H])
        f = expit(gates[:, H:2 * H])
        g = np.tanh(gates[:, 2 * H:3 * H])
        o = expit(gates[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out[:, t] = h
        if want_cache:
            acts[:, t, :H] = i
            acts[:, t, H:2 * H] = f
            acts[:, t, 2 * H:3 * H] = g
            acts[:, t, 3 * H:] = o
            cs[:, t] = c
    cache = (acts, cs) if want_cache else None
    return out, h, c, cache


def lstm_backward(x, w_ih, w_hh, h0, c0, out, acts, cs, d_out, d_hT, d_cT):
    """Backward pass matching :func:`lstm_forward`.

    Returns (dx, dw_ih, dw_hh, db, dh0, dc0).
    """
    B, T, I = x.shape
    H = w_hh.shape[1]
    dx = np.empty_like(x)
    dw_ih = np.zeros_like(w_ih)
    dw_hh = np.zeros_like(w_hh)
    db = np.zeros(4 * H, dtype=x.dtype)
    dh = d_hT.copy()
    dc = d_cT.copy()
    dpre = np.empty((B, 4 * H), dtype=x.dtype)
    for t in range(T - 1, -1, -1):
        i = acts[:, t, :H]
        f = acts[:, t, H:2 * H]
        g = acts[:, t, 2 * H:3 * H]
        o = acts[:, t, 3 * H:]
        c = cs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else c0
        h_prev = out[:, t - 1] if t > 0 else h0
        tanh_c = np.tanh(c)
        dh = dh + d_out[:, t]
        dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
        dpre[:, :H] = dc * g * i * (1.0 - i)
        dpre[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dpre[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dpre[:, 3 * H:] = dh * tanh_c * o * (1.0 - o)
        dx[:, t] = dpre @ w_ih
        dh = dpre @ w_hh
        dw_ih += dpre.T @ x[:, t]
        dw_hh += dpre.T @ h_prev
        db += dpre.sum(axis=0)
        dc = dc * f
    return dx, dw_ih, dw_hh, db, dh, dc


def attention_step(q, keys, vals, scale):
    """Scaled-dot attention of one query row per position over its cache.

    q: [K, N]; keys/vals: [K, ctx, N] (strided views are fine).
    Returns [K, N]: softmax(scale * q[k] . keys[k].T) @ vals[k] per row.
    """
    logits = (keys @ q[:, :, None])[:, :, 0] * scale
    mx = logits.max(axis=1, keepdims=True)
    w = np.exp(logits - mx)
    w /= w.sum(axis=1, keepdims=True)
    return (w[:, None, :] @ vals)[:, 0]
