"""Trainable layers: linear, LSTM, and bidirectional LSTM.

Every layer owns its parameters as :class:`~dpsarnn.tensor.Tensor` objects
with ``requires_grad=True``, exposes them through ``params()`` as
``(name, tensor)`` pairs in a stable order, and supports re-initialization
from a numpy Generator via ``init(rng)``.

The LSTM sequence kernels live in :mod:`dpsarnn.backend`; this module wires
them into the autodiff tape with a hand-written vector-Jacobian product so
the time loop never runs through per-step tape entries.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .backend import kernels
from .errors import EmptySequenceError, NumericFault, ShapeError
from .tensor import Tensor


def prefix_params(prefix, items):
    return [(f"{prefix}.{name}", p) for name, p in items]


@dataclass
class LSTMState:
    """Recurrent carry: hidden h and cell c, shape [..., hidden]."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_size, batch=None, dtype=np.float32):
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


class LinearLayer:
    """y = x Wᵀ + b over the last axis; weight stored [out, in]."""

    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(np.empty((out_features, in_features), dtype=dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None
        self.init(rng or np.random.default_rng(0))

    def init(self, rng):
        bound = 1.0 / math.sqrt(self.in_features)
        self.weight.data[...] = rng.uniform(-bound, bound, self.weight.shape)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def __call__(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"linear expects last dim {self.in_features}, got {x.shape}")
        squeeze = x.ndim == 1
        if squeeze:
            x = tz.reshape(x, (1, self.in_features))
        y = tz.matmul(x, tz.transpose_last2(self.weight))
        if self.bias is not None:
            y = tz.add(y, self.bias)
        if squeeze:
            y = tz.reshape(y, (self.out_features,))
        return y


def _lstm_apply(x, w_ih, w_hh, b, h0, c0):
    """Run the active kernel over x [B,T,I] with a custom backward rule.

    h0/c0 are plain ndarrays [B,H] (carried state is data, not a grad path).
    Returns (out Tensor [B,T,H], hT ndarray, cT ndarray).
    """
    if not (x.dtype == w_ih.dtype == w_hh.dtype == b.dtype):
        raise TypeError(
            f"LSTM input dtype {x.dtype} must match parameter dtype {w_ih.dtype}")
    k = kernels()
    need_grad = tz.recording(x, w_ih, w_hh, b)
    out_d, h_t, c_t, cache = k.lstm_forward(
        x.data, w_ih.data, w_hh.data, b.data, h0, c0, need_grad)
    if not np.isfinite(out_d).all() or not np.isfinite(c_t).all():
        finite_t = np.isfinite(out_d).all(axis=(0, 2))
        step = int(np.argmin(finite_t)) if not finite_t.all() else out_d.shape[1] - 1
        raise NumericFault(f"non-finite LSTM activation at step {step}")

    def bw(g):
        acts, cs = cache
        dx, dw_ih, dw_hh, db, _dh0, _dc0 = k.lstm_backward(
            x.data, w_ih.data, w_hh.data, h0, c0, out_d, acts, cs,
            np.ascontiguousarray(g), np.zeros_like(h_t), np.zeros_like(c_t))
        tz.accumulate(x, dx)
        tz.accumulate(w_ih, dw_ih)
        tz.accumulate(w_hh, dw_hh)
        tz.accumulate(b, db)

    out = tz.record(out_d, (x, w_ih, w_hh, b), bw)
    return out, h_t, c_t


class LSTMLayer:
    """Single-direction LSTM; gate order i, f, g, o; one bias vector.

    Parameter count = 4·(in·hidden + hidden² + hidden).
    """

    bidirectional = False

    def __init__(self, input_size, hidden_size, rng=None, dtype=np.float32):
        self.input_size = input_size
        self.hidden_size = hidden_size
        g4 = 4 * hidden_size
        self.w_ih = Tensor(np.empty((g4, input_size), dtype=dtype), requires_grad=True)
        self.w_hh = Tensor(np.empty((g4, hidden_size), dtype=dtype), requires_grad=True)
        self.b = Tensor(np.empty(g4, dtype=dtype), requires_grad=True)
        self.init(rng or np.random.default_rng(0))

    def init(self, rng):
        h = self.hidden_size
        bound = 1.0 / math.sqrt(h)
        self.w_ih.data[...] = rng.uniform(-bound, bound, self.w_ih.shape)
        self.w_hh.data[...] = rng.uniform(-bound, bound, self.w_hh.shape)
        self.b.data[...] = 0.0
        self.b.data[h:2 * h] = 1.0  # forget gate opens fully at the start

    def params(self):
        return [("w_ih", self.w_ih), ("w_hh", self.w_hh), ("b", self.b)]

    def forward(self, x, state=None):
        """x: Tensor [T, in] or [B, T, in] -> (out [.., T, hidden], LSTMState)."""
        if x.shape[-1] != self.input_size:
            raise ShapeError(f"LSTM expects last dim {self.input_size}, got {x.shape}")
        if x.ndim == 2:
            out, st = self.forward(tz.reshape(x, (1,) + x.shape), state_batched(state, 1))
            return tz.reshape(out, out.shape[1:]), LSTMState(st.h[0], st.c[0])
        if x.ndim != 3:
            raise ShapeError(f"LSTM input must be rank 2 or 3, got {x.shape}")
        n_batch, n_steps, _ = x.shape
        if n_steps == 0:
            raise EmptySequenceError("LSTM forward over an empty sequence")
        dt = x.dtype
        if state is None:
            h0 = np.zeros((n_batch, self.hidden_size), dtype=dt)
            c0 = np.zeros_like(h0)
        else:
            h0 = np.ascontiguousarray(state.h, dtype=dt)
            c0 = np.ascontiguousarray(state.c, dtype=dt)
            if h0.shape != (n_batch, self.hidden_size):
                raise ShapeError(
                    f"state shape {h0.shape} does not match batch {n_batch}, "
                    f"hidden {self.hidden_size}")
        out, h_t, c_t = _lstm_apply(x, self.w_ih, self.w_hh, self.b, h0, c0)
        return out, LSTMState(h_t, c_t)

    __call__ = forward

    def step(self, x_t, state):
        """One timestep: x_t [in] or [B, in] -> (h, next LSTMState)."""
        shape = x_t.shape
        out, st = self.forward(tz.reshape(x_t, shape[:-1] + (1,) + shape[-1:]), state)
        return tz.reshape(out, shape[:-1] + (self.hidden_size,)), st


def state_batched(state, n_batch):
    if state is None:
        return None
    return LSTMState(state.h.reshape(n_batch, -1), state.c.reshape(n_batch, -1))


class BiLSTMLayer:
    """Two half-width LSTMs over opposite directions, outputs concatenated.

    hidden_size is the total output width; each direction runs at hidden/2.
    """

    bidirectional = True

    def __init__(self, input_size, hidden_size, rng=None, dtype=np.float32):
        if hidden_size % 2:
            raise ValueError(f"bidirectional hidden size must be even, got {hidden_size}")
        self.input_size = input_size
        self.hidden_size = hidden_size
        rng = rng or np.random.default_rng(0)
        self.fwd = LSTMLayer(input_size, hidden_size // 2, rng, dtype)
        self.bwd = LSTMLayer(input_size, hidden_size // 2, rng, dtype)

    def init(self, rng):
        self.fwd.init(rng)
        self.bwd.init(rng)

    def params(self):
        return prefix_params("fwd", self.fwd.params()) + prefix_params("bwd", self.bwd.params())

    def forward(self, x):
        y_f, _ = self.fwd.forward(x)
        y_r, _ = self.bwd.forward(tz.flip_time(x))
        return tz.concat_last([y_f, tz.flip_time(y_r)])

    __call__ = forward


class LayerNorm:
    """Trainable gain/bias pair applied by tensor.layer_norm."""

    def __init__(self, width, eps=1e-5, dtype=np.float32):
        self.width = width
        self.eps = eps
        self.gain = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)

    def init(self, rng):
        self.gain.data[...] = 1.0
        self.bias.data[...] = 0.0

    def params(self):
        return [("gain", self.gain), ("bias", self.bias)]

    def __call__(self, x):
        return tz.layer_norm(x, self.gain, self.bias, self.eps)


def param_count(items):
    """Total element count over a params() listing."""
    return sum(p.size for _, p in items)
