"""Recurrent block with gated single-headed attention and a feedforward tail.

Pipeline (feature width N throughout):

    y  = lin_rnn(rnn(ln_in(x)))          rnn is an LSTM or BiLSTM
    q  = ln_q(y);  kv = ln_kv(y)
    z  = q + attention(q, kv)            residual
    out = z + feedforward(z)             residual

The attention is single-headed and gated by three trainable vectors: keys
are scaled by Sigm(kprime), queries by Sigm(qprime) after a linear map, and
values by Sigm(lin_v1(vprime)) ⊙ Tanh(lin_v2(vprime)).  The value gate is
recomputed each training step and frozen to a constant for evaluation.

In causal mode a query may only attend to its own and earlier positions,
enforced with a pre-softmax additive -inf mask.  Streaming uses
:func:`sarnn_step`, which carries LSTM state plus a growing key/value cache
so that chunk-by-chunk evaluation reproduces the offline causal result.
"""

import math

import numpy as np

from . import tensor as tz
from .backend import kernels
from .errors import FreezeRequiredError, ShapeError
from .layers import BiLSTMLayer, LayerNorm, LinearLayer, LSTMLayer, prefix_params
from .tensor import Tensor


def _neg_inf_upper(t_steps, dtype):
    """[T,T] additive mask: 0 on and below the diagonal, -inf above."""
    mask = np.zeros((t_steps, t_steps), dtype=dtype)
    mask[np.triu_indices(t_steps, k=1)] = -np.inf
    return mask


class AttentionBlock:
    """Gated single-headed scaled dot-product attention over width N."""

    def __init__(self, width, causal, rng=None, dtype=np.float32):
        self.width = width
        self.causal = causal
        rng = rng or np.random.default_rng(0)
        self.qprime = Tensor(np.zeros((1, width), dtype=dtype), requires_grad=True)
        self.kprime = Tensor(np.zeros((1, width), dtype=dtype), requires_grad=True)
        self.vprime = Tensor(np.zeros((1, width), dtype=dtype), requires_grad=True)
        self.lin_q = LinearLayer(width, width, rng=rng, dtype=dtype)
        self.lin_v1 = LinearLayer(width, width, rng=rng, dtype=dtype)
        self.lin_v2 = LinearLayer(width, width, rng=rng, dtype=dtype)
        self.frozen_v_gate = None

    def init(self, rng):
        self.qprime.data[...] = 0.0
        self.kprime.data[...] = 0.0
        self.vprime.data[...] = 0.0
        self.lin_q.init(rng)
        self.lin_v1.init(rng)
        self.lin_v2.init(rng)
        self.frozen_v_gate = None

    def params(self):
        return ([("qprime", self.qprime), ("kprime", self.kprime), ("vprime", self.vprime)]
                + prefix_params("lin_q", self.lin_q.params())
                + prefix_params("lin_v1", self.lin_v1.params())
                + prefix_params("lin_v2", self.lin_v2.params()))

    def _v_gate(self, mode):
        if mode == "train":
            return tz.mul(tz.sigmoid(self.lin_v1(self.vprime)),
                          tz.tanh(self.lin_v2(self.vprime)))
        if self.frozen_v_gate is None:
            raise FreezeRequiredError(
                "eval-mode attention requires freeze_v_gate() first")
        return self.frozen_v_gate

    def _projected(self, q, kv, mode):
        """Common projections: (Q_r, K_r, V_r), each [.., T, N]."""
        if q.shape != kv.shape:
            raise ShapeError(f"query shape {q.shape} != key/value shape {kv.shape}")
        if q.shape[-1] != self.width:
            raise ShapeError(f"attention width {self.width}, got input {q.shape}")
        k_r = tz.mul(kv, tz.sigmoid(self.kprime))
        q_r = tz.mul(self.lin_q(q), tz.sigmoid(self.qprime))
        v_r = tz.mul(kv, self._v_gate(mode))
        return q_r, k_r, v_r

    def _logits(self, q_r, k_r):
        scale = 1.0 / math.sqrt(self.width)
        logits = tz.mul(tz.matmul(q_r, tz.transpose_last2(k_r)), scale)
        if self.causal:
            logits = tz.add(logits, Tensor(
                _neg_inf_upper(logits.shape[-1], logits.dtype)))
        return logits

    def forward(self, q, kv, mode):
        """q, kv: [.., T, N] -> attended values [.., T, N]."""
        q_r, k_r, v_r = self._projected(q, kv, mode)
        return tz.matmul(tz.softmax_rows(self._logits(q_r, k_r)), v_r)

    __call__ = forward

    def weights(self, q, kv, mode="eval"):
        """The [.., T, T] softmax weight matrix (inspection/test hook)."""
        q_r, k_r, _ = self._projected(q, kv, mode)
        return tz.softmax_rows(self._logits(q_r, k_r)).data


def freeze_v_gate(attn):
    """Bake the value gate into a constant for evaluation. Idempotent."""
    gate = tz.mul(tz.sigmoid(attn.lin_v1(attn.vprime)),
                  tz.tanh(attn.lin_v2(attn.vprime)))
    attn.frozen_v_gate = Tensor(gate.data.copy())
    return attn.frozen_v_gate


class FeedForwardBlock:
    """LN -> linear N->4N -> GELU -> dropout -> linear 4N->N."""

    def __init__(self, width, dropout_p, rng=None, dtype=np.float32):
        self.width = width
        self.dropout_p = dropout_p
        rng = rng or np.random.default_rng(0)
        self.ln = LayerNorm(width, dtype=dtype)
        self.lin1 = LinearLayer(width, 4 * width, rng=rng, dtype=dtype)
        self.lin2 = LinearLayer(4 * width, width, rng=rng, dtype=dtype)

    def init(self, rng):
        self.ln.init(rng)
        self.lin1.init(rng)
        self.lin2.init(rng)

    def params(self):
        return (prefix_params("ln", self.ln.params())
                + prefix_params("lin1", self.lin1.params())
                + prefix_params("lin2", self.lin2.params()))

    def forward(self, x, mode, rng=None):
        h = tz.gelu(self.lin1(self.ln(x)))
        if mode == "train" and self.dropout_p > 0:
            if rng is None:
                raise ValueError("train-mode dropout needs an RNG")
            h = tz.dropout(h, self.dropout_p, rng)
        return self.lin2(h)

    __call__ = forward


class SarnnBlock:
    """The full unit; bidirectional flag picks BiLSTM vs LSTM for the RNN.

    With attention_enabled=False the block reduces to LN -> RNN -> linear
    (the no-attention ablation), and ln_q/ln_kv/attention/feedforward are
    not constructed.
    """

    def __init__(self, width, hidden, bidirectional, causal_attention,
                 dropout_p=0.05, attention_enabled=True, rng=None, dtype=np.float32):
        self.width = width
        self.hidden = hidden
        self.bidirectional = bidirectional
        self.attention_enabled = attention_enabled
        rng = rng or np.random.default_rng(0)
        self.ln_in = LayerNorm(width, dtype=dtype)
        rnn_cls = BiLSTMLayer if bidirectional else LSTMLayer
        self.rnn = rnn_cls(width, hidden, rng=rng, dtype=dtype)
        self.lin_rnn = LinearLayer(hidden, width, rng=rng, dtype=dtype)
        if attention_enabled:
            self.ln_q = LayerNorm(width, dtype=dtype)
            self.ln_kv = LayerNorm(width, dtype=dtype)
            self.attn = AttentionBlock(width, causal=causal_attention, rng=rng, dtype=dtype)
            self.ff = FeedForwardBlock(width, dropout_p, rng=rng, dtype=dtype)
        else:
            self.ln_q = self.ln_kv = self.attn = self.ff = None

    def init(self, rng):
        self.ln_in.init(rng)
        self.rnn.init(rng)
        self.lin_rnn.init(rng)
        if self.attention_enabled:
            self.ln_q.init(rng)
            self.ln_kv.init(rng)
            self.attn.init(rng)
            self.ff.init(rng)

    def params(self):
        out = (prefix_params("ln_in", self.ln_in.params())
               + prefix_params("rnn", self.rnn.params())
               + prefix_params("lin_rnn", self.lin_rnn.params()))
        if self.attention_enabled:
            out += (prefix_params("ln_q", self.ln_q.params())
                    + prefix_params("ln_kv", self.ln_kv.params())
                    + prefix_params("attn", self.attn.params())
                    + prefix_params("ff", self.ff.params()))
        return out

    def _rnn_out(self, x, init_state):
        if self.bidirectional:
            if init_state is not None:
                raise ValueError("initial state is meaningless for a bidirectional block")
            return self.rnn(x), None
        out, state = self.rnn.forward(x, init_state)
        return out, state

    def forward(self, x, init_state=None, mode="train", rng=None):
        """x: [.., T, N] -> (out [.., T, N], final state or None)."""
        r, state = self._rnn_out(self.ln_in(x), init_state)
        y = self.lin_rnn(r)
        if not self.attention_enabled:
            return y, state
        q = self.ln_q(y)
        kv = self.ln_kv(y)
        z = tz.add(q, self.attn(q, kv, mode))
        out = tz.add(z, self.ff(z, mode, rng))
        return out, state

    __call__ = forward


class AttentionCache:
    """Per-position growing store of projected key/value rows.

    Shapes are [positions, context, width]; context grows by one per
    appended chunk, amortized-doubling the backing arrays.  With
    max_context set, the oldest rows are discarded once full (bounding
    memory at the cost of exact offline equivalence).
    """

    def __init__(self, positions, width, dtype=np.float32, max_context=None):
        if max_context is not None and max_context < 1:
            raise ValueError(f"max_context must be >= 1, got {max_context}")
        self.positions = positions
        self.width = width
        self.max_context = max_context
        cap = 8 if max_context is None else max_context
        self.k_r = np.empty((positions, cap, width), dtype=dtype)
        self.v_r = np.empty((positions, cap, width), dtype=dtype)
        self.length = 0

    def _grow(self):
        cap = self.k_r.shape[1]
        if self.length < cap:
            return
        new = np.empty((self.positions, 2 * cap, self.width), dtype=self.k_r.dtype)
        new[:, :cap] = self.k_r
        self.k_r, new = new, np.empty_like(new)
        new[:, :cap] = self.v_r
        self.v_r = new

    def append(self, k_rows, v_rows):
        """k_rows, v_rows: [positions, 1, width] for the newest chunk."""
        if self.max_context is not None and self.length == self.max_context:
            self.k_r[:, :-1] = self.k_r[:, 1:]
            self.v_r[:, :-1] = self.v_r[:, 1:]
            self.length -= 1
        self._grow()
        self.k_r[:, self.length] = k_rows[:, 0]
        self.v_r[:, self.length] = v_rows[:, 0]
        self.length += 1

    def keys(self):
        return self.k_r[:, :self.length]

    def values(self):
        return self.v_r[:, :self.length]


def attention_step(attn, q, kv, cache):
    """One causal streaming step over a batch of positions.

    q, kv: Tensor [P, 1, N] for the newest chunk; the cache already holds
    rows for earlier chunks.  Appends this chunk's K_r/V_r, then attends
    over everything cached — exactly the newest row of the offline causal
    weight matrix.  Evaluation-only; no gradients flow through this path.
    """
    q_r, k_r, v_r = attn._projected(q, kv, "eval")
    cache.append(k_r.data, v_r.data)
    q_rows = np.ascontiguousarray(q_r.data[:, 0, :])
    out = kernels().attention_step(q_rows, cache.keys(), cache.values(),
                                   1.0 / math.sqrt(attn.width))
    return Tensor(out[:, None, :])


def sarnn_step(block, x, state, cache):
    """Streaming step of a causal SarnnBlock: x [P, 1, N] -> ([P, 1, N], state)."""
    if block.bidirectional:
        raise ValueError("streaming steps require a unidirectional block")
    r, new_state = block.rnn.forward(block.ln_in(x), state)
    y = block.lin_rnn(r)
    if not block.attention_enabled:
        return y, new_state
    q = block.ln_q(y)
    kv = block.ln_kv(y)
    z = tz.add(q, attention_step(block.attn, q, kv, cache))
    out = tz.add(z, block.ff(z, "eval"))
    return out, new_state
