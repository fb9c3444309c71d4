"""Shared test helpers: finite-difference gradient checking and toy builders.

Gradient checks run in double precision with central differences at step
1e-5.  Relative error uses a unit floor in the denominator so near-zero
gradients are compared absolutely: rel = |a - b| / max(1, |a|, |b|).
"""

import numpy as np
import pytest

import dpsarnn.tensor as tz
from dpsarnn.tensor import Tensor

FD_STEP = 1e-5
FD_TOL = 1e-4


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def l2_rel(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (denom if denom else 1.0))


def fd_gradcheck(loss_fn, params, step=FD_STEP):
    """Max relative error between tape gradients and central differences.

    loss_fn() must rebuild the computation from scratch on each call and
    return a scalar Tensor; params is a list of float64 Tensors whose data
    arrays loss_fn reads (perturbed in place for the differences).
    """
    for p in params:
        assert p.dtype == np.float64, "gradient checks must run in float64"
        p.grad = None
    with tz.Tape():
        loss = loss_fn()
        loss.backward()
    worst = 0.0
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = np.asarray(grad, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = float(loss_fn().data)
            flat[i] = keep - step
            down = float(loss_fn().data)
            flat[i] = keep
            fd = (up - down) / (2.0 * step)
            worst = max(worst, rel_err(fd, gflat[i]))
    return worst


def rand64(rng, *shape):
    return np.asarray(rng.standard_normal(shape), dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def as_t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)
