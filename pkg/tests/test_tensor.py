"""Tensor arithmetic and reverse-mode gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dpsarnn.tensor as tz
from dpsarnn.errors import DegenerateRowError, ShapeError, TapeError
from dpsarnn.tensor import Tape, Tensor

from conftest import as_t64, fd_gradcheck, rand64, rel_err


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[1.5, -2.0], [0.25, 4.0]]))
    out = tz.matmul(a, b)
    np.testing.assert_array_equal(out.data, b.data)


def test_matmul_hand_value():
    out = tz.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == pytest.approx(11.0)


def test_matmul_inner_dim_error_names_shapes():
    with pytest.raises(ShapeError) as exc:
        tz.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_matmul_rank_error():
    with pytest.raises(ShapeError):
        tz.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


def test_matmul_grad_of_sum_is_ones_times_bt(rng):
    a = as_t64(rand64(rng, 5, 7), requires_grad=True)
    b = as_t64(rand64(rng, 7, 3), requires_grad=True)
    with Tape():
        loss = tz.tsum(tz.matmul(a, b))
        loss.backward()
    expect = np.ones((5, 3)) @ b.data.T
    assert rel_err(a.grad, expect) < 1e-12


def test_matmul_fd_5x7_7x3(rng):
    a = as_t64(rand64(rng, 5, 7), requires_grad=True)
    b = as_t64(rand64(rng, 7, 3), requires_grad=True)
    w = rand64(rng, 5, 3)

    def loss_fn():
        return tz.tsum(tz.mul(tz.matmul(a, b), Tensor(w)))

    assert fd_gradcheck(loss_fn, [a, b]) < 1e-6


def test_matmul_batched_matches_loop(rng):
    a = rand64(rng, 4, 5, 6)
    b = rand64(rng, 6, 3)
    out = tz.matmul(Tensor(a), Tensor(b)).data
    for j in range(4):
        np.testing.assert_allclose(out[j], a[j] @ b, rtol=1e-12)


def test_matmul_batched_both_operands_fd(rng):
    a = as_t64(rand64(rng, 2, 3, 4), requires_grad=True)
    b = as_t64(rand64(rng, 2, 4, 2), requires_grad=True)
    w = rand64(rng, 2, 3, 2)

    def loss_fn():
        return tz.tsum(tz.mul(tz.matmul(a, b), Tensor(w)))

    assert fd_gradcheck(loss_fn, [a, b]) < 1e-6


# ---------------------------------------------------------------------------
# elementwise ops

def test_sigmoid_of_zero_is_half():
    assert float(tz.sigmoid(Tensor(np.zeros(()))).data) == pytest.approx(0.5)


def test_gelu_of_zero_is_zero():
    assert float(tz.gelu(Tensor(np.zeros(()))).data) == 0.0


def test_gelu_known_values():
    # 0.5 * x * (1 + erf(x / sqrt 2)) at x = 1 and x = -1
    out = tz.gelu(as_t64([1.0, -1.0])).data
    expect = 0.5 * np.array([1.0, -1.0]) * (1.0 + math.erf(1.0 / math.sqrt(2.0)) * np.array([1.0, -1.0]))
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_tanh_gradient_at_0p3_vs_central_difference():
    x = as_t64(np.array(0.3), requires_grad=True)
    with Tape():
        loss = tz.tsum(tz.tanh(x))
        loss.backward()
    h = 1e-6
    fd = (math.tanh(0.3 + h) - math.tanh(0.3 - h)) / (2 * h)
    assert rel_err(x.grad, fd) < 1e-7


@pytest.mark.parametrize("op", ["add", "mul", "sigmoid", "tanh", "gelu"])
def test_elementwise_dispatch(op, rng):
    x = as_t64(rand64(rng, 3, 4))
    if op in ("add", "mul"):
        out = tz.elementwise(op, x, x)
    else:
        out = tz.elementwise(op, x)
    assert out.shape == (3, 4)


def test_elementwise_unknown_op():
    with pytest.raises(ValueError):
        tz.elementwise("pow", Tensor(np.zeros(2)))


@pytest.mark.parametrize("fn", [tz.add, tz.mul, tz.sub, tz.div])
def test_binary_ops_reject_non_broadcastable(fn):
    with pytest.raises(ShapeError):
        fn(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))))


def test_broadcast_row_equals_explicit_replication(rng):
    row = np.asarray(rng.standard_normal((1, 6)), dtype=np.float32)
    x = np.asarray(rng.standard_normal((5, 6)), dtype=np.float32)
    via_broadcast = tz.mul(Tensor(x), Tensor(row)).data
    via_tile = tz.mul(Tensor(x), Tensor(np.tile(row, (5, 1)))).data
    np.testing.assert_array_equal(via_broadcast, via_tile)


def test_broadcast_gradient_sums_over_replicas(rng):
    row = as_t64(rand64(rng, 1, 4), requires_grad=True)
    x = as_t64(rand64(rng, 3, 4))
    with Tape():
        loss = tz.tsum(tz.mul(x, row))
        loss.backward()
    np.testing.assert_allclose(row.grad, x.data.sum(axis=0, keepdims=True), rtol=1e-12)


def test_elementwise_fd_battery(rng):
    x = as_t64(rand64(rng, 3, 5) * 0.7, requires_grad=True)
    w = rand64(rng, 3, 5)
    cases = {
        "sigmoid": lambda: tz.tsum(tz.mul(tz.sigmoid(x), Tensor(w))),
        "tanh": lambda: tz.tsum(tz.mul(tz.tanh(x), Tensor(w))),
        "gelu": lambda: tz.tsum(tz.mul(tz.gelu(x), Tensor(w))),
        "exp": lambda: tz.tsum(tz.mul(tz.exp(x), Tensor(w))),
        "sqrt": lambda: tz.tsum(tz.mul(tz.sqrt(tz.add(tz.mul(x, x), 1.0)), Tensor(w))),
        "div": lambda: tz.tsum(tz.div(Tensor(w), tz.add(tz.mul(x, x), 2.0))),
    }
    for name, fn in cases.items():
        err = fd_gradcheck(fn, [x])
        assert err < 1e-6, f"{name}: {err}"


# ---------------------------------------------------------------------------
# softmax

def test_softmax_uniform_row():
    out = tz.softmax_rows(as_t64([[0.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_masked_row():
    out = tz.softmax_rows(as_t64([[0.0, -np.inf, -np.inf]])).data
    np.testing.assert_array_equal(out, [[1.0, 0.0, 0.0]])


def test_softmax_reference_row():
    out = tz.softmax_rows(as_t64([[1.0, 2.0, 3.0]])).data[0]
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_all_minus_inf_row_rejected():
    with pytest.raises(DegenerateRowError):
        tz.softmax_rows(Tensor(np.full((2, 3), -np.inf)))


def test_softmax_rows_sum_to_one(rng):
    x = as_t64(rand64(rng, 6, 6) * 10.0)
    x.data[np.triu_indices(6, k=1)] = -np.inf
    out = tz.softmax_rows(x).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(6), atol=1e-12)
    assert (out >= 0).all() and (out <= 1).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_softmax_rows_property(rows, cols, seed):
    x = rand64(np.random.default_rng(seed), rows, cols) * 5.0
    out = tz.softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(rows), atol=1e-12)
    assert (out >= 0).all() and (out <= 1).all()


def test_softmax_fd(rng):
    x = as_t64(rand64(rng, 4, 4), requires_grad=True)
    w = rand64(rng, 4, 4)

    def loss_fn():
        return tz.tsum(tz.mul(tz.softmax_rows(x), Tensor(w)))

    assert fd_gradcheck(loss_fn, [x]) < 1e-6


# ---------------------------------------------------------------------------
# layer norm

def test_layer_norm_constant_row_maps_to_zero():
    x = as_t64([[1.0, 1.0, 1.0, 1.0]])
    out = tz.layer_norm(x, as_t64(np.ones(4)), as_t64(np.zeros(4)))
    np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-12)


def test_layer_norm_already_normalized_row():
    x = as_t64([[-1.0, 1.0]])
    out = tz.layer_norm(x, as_t64(np.ones(2)), as_t64(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)


def test_layer_norm_eps_zero_single_feature_guard():
    with pytest.raises(ZeroDivisionError):
        tz.layer_norm(as_t64([[3.0]]), as_t64([1.0]), as_t64([0.0]), eps=0.0)


def test_layer_norm_bad_gain_shape():
    with pytest.raises(ShapeError):
        tz.layer_norm(as_t64(np.zeros((2, 4))), as_t64(np.ones(3)), as_t64(np.zeros(4)))


def test_layer_norm_fd_3x8(rng):
    x = as_t64(rand64(rng, 3, 8), requires_grad=True)
    gain = as_t64(rand64(rng, 8) * 0.5 + 1.0, requires_grad=True)
    bias = as_t64(rand64(rng, 8) * 0.1, requires_grad=True)
    w = rand64(rng, 3, 8)

    def loss_fn():
        return tz.tsum(tz.mul(tz.layer_norm(x, gain, bias), Tensor(w)))

    assert fd_gradcheck(loss_fn, [x, gain, bias]) < 1e-5


# ---------------------------------------------------------------------------
# backward / tape mechanics

def test_backward_sum_gives_ones(rng):
    x = as_t64(rand64(rng, 2, 3, 4), requires_grad=True)
    with Tape():
        tz.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_quadratic():
    x = as_t64([1.0, 2.0], requires_grad=True)
    with Tape():
        tz.tsum(tz.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-12)


def test_backward_rejects_non_scalar(rng):
    x = as_t64(rand64(rng, 3), requires_grad=True)
    with Tape():
        y = tz.mul(x, x)
        with pytest.raises(ShapeError):
            y.backward()


def test_backward_rejects_detached_loss():
    x = as_t64([1.0], requires_grad=True)
    loss = tz.tsum(x)  # no tape active: nothing recorded
    with pytest.raises(TapeError):
        loss.backward()


def test_tape_single_use():
    x = as_t64([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = tz.tsum(tz.mul(x, x))
        loss.backward()
        with pytest.raises(TapeError):
            loss.backward()


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(TapeError):
            with Tape():
                pass


def test_gradient_accumulates_across_reuse(rng):
    x = as_t64([3.0], requires_grad=True)
    with Tape():
        # loss = x*x + 2x -> dloss/dx = 2x + 2 = 8
        tz.tsum(tz.add(tz.mul(x, x), tz.mul(x, 2.0))).backward()
    np.testing.assert_allclose(x.grad, [8.0], rtol=1e-12)


def test_no_grad_outside_tape(rng):
    x = as_t64(rand64(rng, 3), requires_grad=True)
    out = tz.mul(x, x)
    assert out.requires_grad is False
    assert x.grad is None


# ---------------------------------------------------------------------------
# shape ops

def test_transpose_12_involution(rng):
    x = Tensor(np.asarray(rng.standard_normal((3, 4, 5)), dtype=np.float32))
    np.testing.assert_array_equal(tz.transpose_12(tz.transpose_12(x)).data, x.data)


def test_transpose_12_rank_check():
    with pytest.raises(ShapeError):
        tz.transpose_12(Tensor(np.zeros((2, 3))))


def test_concat_last_shapes(rng):
    a = Tensor(np.zeros((7, 3), dtype=np.float32))
    b = Tensor(np.zeros((7, 5), dtype=np.float32))
    assert tz.concat_last([a, b]).shape == (7, 8)


def test_concat_last_mismatch():
    with pytest.raises(ShapeError):
        tz.concat_last([Tensor(np.zeros((7, 3))), Tensor(np.zeros((6, 3)))])


def test_concat_last_fd(rng):
    a = as_t64(rand64(rng, 2, 3), requires_grad=True)
    b = as_t64(rand64(rng, 2, 2), requires_grad=True)
    w = rand64(rng, 2, 5)

    def loss_fn():
        return tz.tsum(tz.mul(tz.concat_last([a, b]), Tensor(w)))

    assert fd_gradcheck(loss_fn, [a, b]) < 1e-8


def test_flip_time_reverses_second_to_last(rng):
    x = rand64(rng, 4, 5, 3)
    np.testing.assert_array_equal(tz.flip_time(Tensor(x)).data, x[:, ::-1, :])


def test_reshape_and_mean_fd(rng):
    x = as_t64(rand64(rng, 2, 6), requires_grad=True)
    w = rand64(rng, 3, 4)

    def loss_fn():
        return tz.mean(tz.mul(tz.reshape(x, (3, 4)), Tensor(w)))

    assert fd_gradcheck(loss_fn, [x]) < 1e-8


# ---------------------------------------------------------------------------
# dropout

def test_dropout_identity_at_p_zero(rng):
    x = Tensor(np.asarray(rng.standard_normal((3, 4)), dtype=np.float32))
    out = tz.dropout(x, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_scales_survivors(rng):
    x = Tensor(np.ones((100, 100), dtype=np.float32))
    out = tz.dropout(x, 0.25, np.random.default_rng(3)).data
    kept = out != 0.0
    np.testing.assert_allclose(out[kept], 1.0 / 0.75, rtol=1e-6)
    assert abs(kept.mean() - 0.75) < 0.02


def test_dropout_rejects_bad_probability():
    x = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        tz.dropout(x, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        tz.dropout(x, -0.1, np.random.default_rng(0))


def test_dropout_deterministic_by_seed(rng):
    x = Tensor(np.asarray(rng.standard_normal(64), dtype=np.float32))
    a = tz.dropout(x, 0.5, np.random.default_rng(7)).data
    b = tz.dropout(x, 0.5, np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# clipping

def test_clip_halves_norm_six_to_three():
    p = as_t64(np.zeros(2), requires_grad=True)
    p.grad = np.array([6.0, 0.0])
    scale = tz.clip_grad_norm([p], 3.0)
    assert scale == pytest.approx(0.5)
    np.testing.assert_allclose(p.grad, [3.0, 0.0], rtol=1e-12)
    assert tz.global_grad_norm([p]) == pytest.approx(3.0, abs=1e-9)


def test_clip_noop_when_under_limit():
    p = as_t64(np.zeros(2), requires_grad=True)
    p.grad = np.array([1.0, 0.0])
    assert tz.clip_grad_norm([p], 3.0) == 1.0
    np.testing.assert_array_equal(p.grad, [1.0, 0.0])


def test_clip_global_across_parameters():
    a = as_t64(np.zeros(1), requires_grad=True)
    b = as_t64(np.zeros(1), requires_grad=True)
    a.grad = np.array([3.0])
    b.grad = np.array([4.0])  # global norm 5
    tz.clip_grad_norm([a, b], 1.0)
    assert tz.global_grad_norm([a, b]) == pytest.approx(1.0, abs=1e-12)


def test_clip_rejects_non_positive_norm():
    with pytest.raises(ValueError):
        tz.clip_grad_norm([], 0.0)


# ---------------------------------------------------------------------------
# determinism

def test_forward_deterministic(rng):
    x = np.asarray(rng.standard_normal((4, 6)), dtype=np.float32)
    a = tz.gelu(tz.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)))).data
    b = tz.gelu(tz.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)))).data
    np.testing.assert_array_equal(a, b)
