"""Gated single-headed attention, feedforward block, and the full recurrent unit."""

import numpy as np
import pytest

import dpsarnn.tensor as tz
from dpsarnn.errors import FreezeRequiredError, ShapeError
from dpsarnn.layers import LSTMState
from dpsarnn.sarnn import (AttentionBlock, AttentionCache, FeedForwardBlock,
                           SarnnBlock, freeze_v_gate, sarnn_step)
from dpsarnn.tensor import Tape, Tensor

from conftest import fd_gradcheck, l2_rel, rand64


def attn64(width, causal=False, seed=0):
    return AttentionBlock(width, causal=causal, rng=np.random.default_rng(seed),
                          dtype=np.float64)


def block64(width, hidden, bidirectional, causal, seed=0, dropout_p=0.0,
            attention_enabled=True):
    return SarnnBlock(width, hidden, bidirectional=bidirectional,
                      causal_attention=causal, dropout_p=dropout_p,
                      attention_enabled=attention_enabled,
                      rng=np.random.default_rng(seed), dtype=np.float64)


# ---------------------------------------------------------------------------
# attention projections and gates

def test_zero_gate_vectors_mean_half_gates(rng):
    attn = attn64(4)
    q = Tensor(rand64(rng, 3, 4))
    kv = Tensor(rand64(rng, 3, 4))
    q_r, k_r, _ = attn._projected(q, kv, "train")
    np.testing.assert_allclose(k_r.data, 0.5 * kv.data, rtol=1e-15)
    lin_q = attn.lin_q(q).data
    np.testing.assert_allclose(q_r.data, 0.5 * lin_q, rtol=1e-15)


def test_single_position_attention_returns_value_row(rng):
    attn = attn64(5)
    freeze_v_gate(attn)
    q = Tensor(rand64(rng, 1, 5))
    kv = Tensor(rand64(rng, 1, 5))
    out = attn(q, kv, "eval").data
    v_r = kv.data * attn.frozen_v_gate.data
    np.testing.assert_allclose(out, v_r, rtol=1e-12)


def test_causal_weights_lower_triangular_rows_sum_one(rng):
    attn = attn64(6, causal=True)
    q = Tensor(rand64(rng, 4, 6))
    kv = Tensor(rand64(rng, 4, 6))
    w = attn.weights(q, kv, mode="train")
    assert w.shape == (4, 4)
    np.testing.assert_array_equal(np.triu(w, k=1), np.zeros((4, 4)))
    np.testing.assert_allclose(w.sum(axis=-1), np.ones(4), atol=1e-12)
    assert (w >= 0).all()


def test_noncausal_weights_rows_sum_one(rng):
    attn = attn64(6)
    q = Tensor(rand64(rng, 5, 6))
    kv = Tensor(rand64(rng, 5, 6))
    w = attn.weights(q, kv, mode="train")
    np.testing.assert_allclose(w.sum(axis=-1), np.ones(5), atol=1e-12)


def test_attention_joint_key_value_permutation_invariance(rng):
    attn = attn64(4, causal=False)
    freeze_v_gate(attn)
    q = Tensor(rand64(rng, 6, 4))
    kv = rand64(rng, 6, 4)
    perm = np.random.default_rng(1).permutation(6)
    out = attn(q, Tensor(kv), "eval").data
    out_perm = attn(q, Tensor(kv[perm]), "eval").data
    np.testing.assert_allclose(out, out_perm, atol=1e-12)


def test_attention_shape_mismatch(rng):
    attn = attn64(4)
    with pytest.raises(ShapeError):
        attn(Tensor(rand64(rng, 3, 4)), Tensor(rand64(rng, 2, 4)), "train")
    with pytest.raises(ShapeError):
        attn(Tensor(rand64(rng, 3, 5)), Tensor(rand64(rng, 3, 5)), "train")


def test_eval_before_freeze_rejected(rng):
    attn = attn64(4)
    q = Tensor(rand64(rng, 2, 4))
    with pytest.raises(FreezeRequiredError):
        attn(q, q, "eval")


# ---------------------------------------------------------------------------
# freezing the value gate

def test_train_vs_frozen_eval_bitidentical(rng):
    attn = attn64(4, seed=3)
    q = Tensor(rand64(rng, 3, 4))
    kv = Tensor(rand64(rng, 3, 4))
    train_out = attn(q, kv, "train").data
    freeze_v_gate(attn)
    eval_out = attn(q, kv, "eval").data
    np.testing.assert_array_equal(train_out, eval_out)


def test_freeze_matches_gate_definition():
    attn = attn64(4, seed=5)
    attn.vprime.data[...] = np.random.default_rng(2).standard_normal((1, 4))
    freeze_v_gate(attn)
    expect = (tz.sigmoid(attn.lin_v1(attn.vprime)).data
              * tz.tanh(attn.lin_v2(attn.vprime)).data)
    np.testing.assert_array_equal(attn.frozen_v_gate.data, expect)


def test_frozen_gate_ignores_later_weight_mutation(rng):
    attn = attn64(4, seed=1)
    freeze_v_gate(attn)
    q = Tensor(rand64(rng, 3, 4))
    kv = Tensor(rand64(rng, 3, 4))
    before = attn(q, kv, "eval").data.copy()
    attn.lin_v1.weight.data[...] = 99.0
    attn.lin_v2.weight.data[...] = -99.0
    after = attn(q, kv, "eval").data
    np.testing.assert_array_equal(before, after)


def test_freeze_idempotent():
    attn = attn64(4, seed=2)
    g1 = freeze_v_gate(attn).data.copy()
    g2 = freeze_v_gate(attn).data
    np.testing.assert_array_equal(g1, g2)


def test_frozen_gate_entries_in_open_unit_interval():
    attn = attn64(8, seed=7)
    attn.vprime.data[...] = np.random.default_rng(0).standard_normal((1, 8)) * 3
    gate = freeze_v_gate(attn).data
    assert (np.abs(gate) < 1.0).all()


# ---------------------------------------------------------------------------
# feedforward block

def test_ff_zero_second_linear_gives_zero(rng):
    ff = FeedForwardBlock(6, dropout_p=0.0, rng=np.random.default_rng(0),
                          dtype=np.float64)
    ff.lin2.weight.data[...] = 0.0
    ff.lin2.bias.data[...] = 0.0
    out = ff(Tensor(rand64(rng, 4, 6)), "train")
    np.testing.assert_array_equal(out.data, np.zeros((4, 6)))


def test_ff_hidden_width_is_4n():
    ff = FeedForwardBlock(8, dropout_p=0.05)
    assert ff.lin1.weight.shape == (32, 8)
    assert ff.lin2.weight.shape == (8, 32)


def test_ff_eval_independent_of_rng(rng):
    ff = FeedForwardBlock(5, dropout_p=0.05, rng=np.random.default_rng(1),
                          dtype=np.float64)
    x = Tensor(rand64(rng, 3, 5))
    a = ff(x, "eval", np.random.default_rng(0)).data
    b = ff(x, "eval", np.random.default_rng(99)).data
    np.testing.assert_array_equal(a, b)


def test_ff_train_requires_rng_when_dropping():
    ff = FeedForwardBlock(5, dropout_p=0.05)
    with pytest.raises(ValueError):
        ff(Tensor(np.zeros((2, 5), dtype=np.float32)), "train", None)


def test_ff_dropout_monte_carlo_mean_matches_eval(rng):
    ff = FeedForwardBlock(8, dropout_p=0.05, rng=np.random.default_rng(3),
                          dtype=np.float64)
    x = Tensor(rand64(rng, 6, 8))
    eval_out = ff(x, "eval").data
    drop_rng = np.random.default_rng(12345)
    acc = np.zeros_like(eval_out)
    n = 10_000
    for _ in range(n):
        acc += ff(x, "train", drop_rng).data
    assert l2_rel(acc / n, eval_out) < 0.02


# ---------------------------------------------------------------------------
# the full unit

def test_block_preserves_shape(rng):
    block = block64(8, 8, bidirectional=True, causal=False)
    x = Tensor(rand64(rng, 2, 5, 8))
    out, state = block(x, None, "train")
    assert out.shape == (2, 5, 8)
    assert state is None


def test_block_returns_state_when_unidirectional(rng):
    block = block64(8, 8, bidirectional=False, causal=True)
    x = Tensor(rand64(rng, 2, 5, 8))
    out, state = block(x, None, "train")
    assert out.shape == (2, 5, 8)
    assert state.h.shape == (2, 8)


def test_block_rejects_state_for_bidirectional(rng):
    block = block64(8, 8, bidirectional=True, causal=False)
    x = Tensor(rand64(rng, 1, 4, 8))
    with pytest.raises(ValueError):
        block(x, LSTMState.zeros(8, batch=1, dtype=np.float64), "train")


def test_block_residuals_pass_query_through(rng):
    """With zero value gates (init) and zero ff.lin2, out == ln_q(lin_rnn(rnn(ln_in(x))))."""
    block = block64(6, 8, bidirectional=True, causal=False, seed=4)
    block.ff.lin2.weight.data[...] = 0.0
    block.ff.lin2.bias.data[...] = 0.0
    x = Tensor(rand64(rng, 1, 5, 6))
    out, _ = block(x, None, "train")
    y = block.lin_rnn(block.rnn(block.ln_in(x)))
    expect = block.ln_q(y).data
    np.testing.assert_array_equal(out.data, expect)


def test_block_ablation_reduces_to_ln_rnn_linear(rng):
    block = block64(6, 8, bidirectional=False, causal=True,
                    attention_enabled=False, seed=4)
    assert block.attn is None and block.ff is None
    x = Tensor(rand64(rng, 1, 5, 6))
    out, _ = block(x, None, "train")
    r, _ = block.rnn.forward(block.ln_in(x), None)
    np.testing.assert_array_equal(out.data, block.lin_rnn(r).data)


def test_causal_block_ignores_future_positions(rng):
    block = block64(6, 6, bidirectional=False, causal=True, seed=9)
    for half in [block.attn]:
        freeze_v_gate(half)
    x = rand64(rng, 1, 7, 6)
    base, _ = block(Tensor(x), None, "eval")
    x2 = x.copy()
    x2[0, 4:] += np.random.default_rng(5).standard_normal((3, 6))
    pert, _ = block(Tensor(x2), None, "eval")
    diff = np.abs(base.data[0, :4] - pert.data[0, :4]).max()
    assert diff <= 1e-6


def test_full_block_fd_unidirectional_causal(rng):
    block = block64(4, 4, bidirectional=False, causal=True, seed=11)
    x = Tensor(rand64(rng, 1, 5, 4), requires_grad=True)
    w = rand64(rng, 1, 5, 4)

    def loss_fn():
        out, _ = block(x, None, "train")
        return tz.tsum(tz.mul(out, Tensor(w)))

    params = [x] + [p for _, p in block.params()]
    assert fd_gradcheck(loss_fn, params) < 1e-4


def test_full_block_fd_bidirectional(rng):
    block = block64(4, 4, bidirectional=True, causal=False, seed=12)
    x = Tensor(rand64(rng, 1, 3, 4), requires_grad=True)
    w = rand64(rng, 1, 3, 4)

    def loss_fn():
        out, _ = block(x, None, "train")
        return tz.tsum(tz.mul(out, Tensor(w)))

    params = [x] + [p for _, p in block.params()]
    assert fd_gradcheck(loss_fn, params) < 1e-4


# ---------------------------------------------------------------------------
# streaming attention cache

def test_cache_append_and_views(rng):
    cache = AttentionCache(positions=3, width=4)
    for i in range(10):
        k = np.full((3, 1, 4), float(i), dtype=np.float32)
        cache.append(k, -k)
    assert cache.length == 10
    assert cache.keys().shape == (3, 10, 4)
    np.testing.assert_array_equal(cache.keys()[:, 7], np.full((3, 4), 7.0))
    np.testing.assert_array_equal(cache.values()[:, 7], np.full((3, 4), -7.0))


def test_cache_eviction_keeps_newest(rng):
    cache = AttentionCache(positions=2, width=3, max_context=4)
    for i in range(9):
        row = np.full((2, 1, 3), float(i), dtype=np.float32)
        cache.append(row, row)
    assert cache.length == 4
    np.testing.assert_array_equal(cache.keys()[0, :, 0], [5.0, 6.0, 7.0, 8.0])


def test_cache_rejects_bad_max_context():
    with pytest.raises(ValueError):
        AttentionCache(positions=1, width=2, max_context=0)


def test_streamed_block_matches_offline_causal(rng):
    block = SarnnBlock(6, 8, bidirectional=False, causal_attention=True,
                       dropout_p=0.0, rng=np.random.default_rng(21),
                       dtype=np.float32)
    freeze_v_gate(block.attn)
    positions, steps = 3, 7
    x = np.asarray(rng.standard_normal((positions, steps, 6)), np.float32)
    offline, _ = block(Tensor(x), None, "eval")
    cache = AttentionCache(positions, 6)
    state = None
    outs = []
    for j in range(steps):
        y, state = sarnn_step(block, Tensor(x[:, j:j + 1]), state, cache)
        outs.append(y.data)
    streamed = np.concatenate(outs, axis=1)
    assert l2_rel(streamed, offline.data) < 2e-5


def test_sarnn_step_rejects_bidirectional(rng):
    block = block64(4, 4, bidirectional=True, causal=False)
    with pytest.raises(ValueError):
        sarnn_step(block, Tensor(rand64(rng, 2, 1, 4)), None,
                   AttentionCache(2, 4))
