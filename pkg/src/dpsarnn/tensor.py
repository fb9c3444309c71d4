"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array plus an optional gradient buffer.
Operations executed while a :class:`Tape` is active record a backward rule;
:func:`backward` replays the rules in reverse to populate ``grad`` on every
tensor that requires it. Tapes are thread-local, so independent models can
run on independent threads.

Default dtype is float32; gradient checks run the same graph in float64.
"""

import math
import threading

import numpy as np
from scipy.special import erf, expit

from .errors import DegenerateRowError, ShapeError, TapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered log of differentiable operations.

    Entries are (output tensor, backward function) pairs appended in
    execution order; replaying them in reverse accumulates gradients
    additively. A tape can be consumed by :func:`backward` exactly once.
    """

    def __init__(self):
        self._entries = []
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def __len__(self):
        return len(self._entries)


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_entry")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._entry = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def record(out_data, parents, backward_fn):
    """Wrap an op result, registering backward_fn on the active tape.

    backward_fn(grad_out) must accumulate into the parents via accumulate().
    This is the extension point custom ops (framing, OLA, LSTM) build on.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and not tape._consumed and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        out._entry = len(tape._entries)
        tape._entries.append((out, backward_fn))
    return out


def recording(*tensors):
    """True when an unconsumed tape is active and any argument needs grad."""
    tape = _active_tape()
    return (tape is not None and not tape._consumed
            and any(t.requires_grad for t in tensors))


def accumulate(t, g):
    """Add gradient g (unbroadcast to t's shape) into t.grad."""
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g, dtype=t.data.dtype), t.data.shape)
    if t.grad is None:
        t.grad = np.array(g)  # copy: g may be a view of another tensor's grad
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss):
    """Populate grad on every requires_grad tensor reachable from loss."""
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor")
    if loss.data.ndim != 0:
        raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is detached from any tape")
    if tape._consumed:
        raise TapeError("tape already consumed; record a fresh tape before calling backward again")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for idx in range(loss._entry, -1, -1):
        out, backward_fn = tape._entries[idx]
        if out.grad is not None:
            backward_fn(out.grad)
    tape._consumed = True


def _check_broadcast(a, b):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        accumulate(a, g)
        accumulate(b, g)

    return record(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        accumulate(a, g)
        accumulate(b, -g)

    return record(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return record(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def bw(g):
        accumulate(a, g / b.data)
        accumulate(b, -g * a.data / (b.data * b.data))

    return record(a.data / b.data, (a, b), bw)


def neg(a):
    def bw(g):
        accumulate(a, -g)

    return record(-a.data, (a,), bw)


def sigmoid(a):
    y = expit(a.data)

    def bw(g):
        accumulate(a, g * y * (1.0 - y))

    return record(y, (a,), bw)


def tanh(a):
    y = np.tanh(a.data)

    def bw(g):
        accumulate(a, g * (1.0 - y * y))

    return record(y, (a,), bw)


def gelu(a):
    """Exact Gaussian-CDF GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf2 = np.multiply(x, _INV_SQRT2, out=np.empty_like(x))
    erf(cdf2, out=cdf2)
    cdf2 += 1.0
    y = np.multiply(x, cdf2, out=np.empty_like(x))
    y *= 0.5

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        accumulate(a, g * (0.5 * cdf2 + x * pdf))

    return record(y, (a,), bw)


def exp(a):
    y = np.exp(a.data)

    def bw(g):
        accumulate(a, g * y)

    return record(y, (a,), bw)


def log(a):
    def bw(g):
        accumulate(a, g / a.data)

    return record(np.log(a.data), (a,), bw)


def sqrt(a):
    y = np.sqrt(a.data)

    def bw(g):
        accumulate(a, g * 0.5 / y)

    return record(y, (a,), bw)


def absolute(a):
    s = np.sign(a.data)

    def bw(g):
        accumulate(a, g * s)

    return record(np.abs(a.data), (a,), bw)


_ELEMENTWISE = {"add": add, "mul": mul, "sigmoid": sigmoid, "tanh": tanh, "gelu": gelu}


def elementwise(op, *args):
    """Dispatch by name; op in {add, mul, sigmoid, tanh, gelu}."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def dropout(a, p, rng):
    """Inverted dropout: scale survivors by 1/(1-p). Identity when p == 0."""
    if p < 0 or p >= 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    scale = 1.0 / (1.0 - p)

    def bw(g):
        accumulate(a, g * keep * scale)

    return record(a.data * keep * scale, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(a, axis=None):
    shape = a.data.shape

    def bw(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, shape))
        else:
            accumulate(a, np.broadcast_to(np.expand_dims(g, axis), shape))

    return record(a.data.sum(axis=axis), (a,), bw)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    shape = a.data.shape

    def bw(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g / n, shape))
        else:
            accumulate(a, np.broadcast_to(np.expand_dims(g / n, axis), shape))

    return record(a.data.mean(axis=axis), (a,), bw)


def reshape(a, shape):
    old = a.data.shape

    def bw(g):
        accumulate(a, g.reshape(old))

    return record(a.data.reshape(shape), (a,), bw)


def transpose_12(a):
    """Swap the first two axes of a rank-3 tensor; its own inverse."""
    if a.data.ndim != 3:
        raise ShapeError(f"transpose_12 expects rank 3, got shape {a.data.shape}")

    def bw(g):
        accumulate(a, g.swapaxes(0, 1))

    return record(np.ascontiguousarray(a.data.swapaxes(0, 1)), (a,), bw)


def transpose_last2(a):
    if a.data.ndim < 2:
        raise ShapeError(f"need rank >= 2 to swap the last two axes, got {a.data.shape}")

    def bw(g):
        accumulate(a, g.swapaxes(-1, -2))

    return record(a.data.swapaxes(-1, -2), (a,), bw)


def flip_time(a):
    """Reverse the time axis (second-to-last)."""
    if a.data.ndim < 2:
        raise ShapeError(f"need rank >= 2 to flip the time axis, got {a.data.shape}")

    def bw(g):
        accumulate(a, np.flip(g, axis=-2))

    return record(np.ascontiguousarray(np.flip(a.data, axis=-2)), (a,), bw)


def concat_last(parts):
    """Concatenate along the last axis; all other dims must match."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_last needs at least one tensor")
    lead = parts[0].data.shape[:-1]
    for p in parts[1:]:
        if p.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last mismatch: {parts[0].data.shape} vs {p.data.shape}")
    widths = [p.data.shape[-1] for p in parts]
    offs = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, offs[:-1], offs[1:]):
            accumulate(p, g[..., lo:hi])

    return record(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), bw)


# ---------------------------------------------------------------------------
# normalization / attention primitives

def softmax_rows(a):
    """Softmax over the last axis; -inf entries get exactly zero weight."""
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateRowError("softmax row with all entries -inf")
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        accumulate(a, y * (g - dot))

    return record(y, (a,), bw)


def layer_norm(a, gain, bias, eps=1e-5):
    """Zero-mean unit-variance over the last axis, then affine gain and bias."""
    n = a.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"gain/bias must have shape ({n},), got {gain.data.shape} and {bias.data.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if eps == 0 and n == 1:
        raise ZeroDivisionError("layer_norm over a single feature with eps=0 divides by zero")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    sq = np.multiply(xc, xc)
    var = sq.mean(axis=-1, keepdims=True)
    var += eps
    np.sqrt(var, out=var)
    inv = np.divide(1.0, var, out=var)
    xhat = np.multiply(xc, inv, out=sq)
    y = np.multiply(xhat, gain.data)
    y += bias.data

    def bw(g):
        accumulate(bias, g)
        accumulate(gain, g * xhat)
        dxhat = g * gain.data
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv ** 3
        dmu = (-inv) * dxhat.sum(axis=-1, keepdims=True) + dvar * (-2.0 / n) * xc.sum(
            axis=-1, keepdims=True)
        accumulate(a, dxhat * inv + dvar * 2.0 * xc / n + dmu / n)

    return record(y, (a, gain, bias), bw)


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b):
    """Matrix product; supports batched operands via leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")

    if ad.ndim > 2 and bd.ndim == 2:
        # Batched activations against a plain weight matrix: one flat product
        # instead of a loop of tiny per-row products.
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = np.matmul(a2, bd).reshape(ad.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            accumulate(a, np.matmul(g2, bd.T).reshape(ad.shape))
            accumulate(b, np.matmul(a2.T, g2))

        return record(out, (a, b), bw)

    def bw(g):
        accumulate(a, np.matmul(g, bd.swapaxes(-1, -2)))
        accumulate(b, np.matmul(ad.swapaxes(-1, -2), g))

    return record(np.matmul(ad, bd), (a, b), bw)


# ---------------------------------------------------------------------------
# gradient utilities

def clip_grad_norm(params, max_norm):
    """Rescale all grads jointly so the global l2 norm is at most max_norm.

    Returns the scale factor applied (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm == 0.0 or norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= p.grad.dtype.type(scale)
    return scale


def global_grad_norm(params):
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(sq)
