"""Dual-path enhancement network over framed, chunked waveforms.

Signal path: samples [M] -> frames [T, L] (size L, shift R, rectangular,
zero-padded tail) -> chunks [J, K, L] (length K frames, shift P) -> linear
L->N -> a stack of dual-path blocks over width N -> linear N->L -> inverse
chunking (overlap-add over chunks) -> inverse framing (overlap-add over
frames) -> samples [M].  Both overlap-adds divide by the per-position
contribution count, so chunk/frame roundtrips are exact.

Each dual-path block runs a bidirectional SARNN along the K frames inside
every chunk (intra), transposes, runs a second SARNN along the J chunks at
every intra-chunk position (inter; unidirectional + causally masked
attention in causal mode), and transposes back.  Blocks are densely
connected: block b consumes the concatenation of the input projection and
all previous block outputs, reduced back to width N by a linear projection
when wider than N.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tz
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (CheckpointError, EmptySequenceError, ShapeError,
                     SignalTooShortError)
from .layers import LinearLayer, param_count, prefix_params
from .sarnn import SarnnBlock, freeze_v_gate, sarnn_step
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and width settings for the enhancement network."""

    L: int = 16              # frame size (samples)
    R: int = 8               # frame shift (samples)
    K: int = 63              # chunk length (frames)
    P: int = 31              # chunk shift (frames)
    N: int = 128             # feature width
    H: int = 256             # RNN hidden width
    num_blocks: int = 6
    causal: bool = True
    dropout_p: float = 0.05
    attention_enabled: bool = True
    max_context: int | None = None

    def __post_init__(self):
        if min(self.L, self.R, self.K, self.P, self.N, self.H, self.num_blocks) < 1:
            raise ValueError("all geometry/width fields must be positive")
        if self.R > self.L:
            raise ValueError(f"frame shift R={self.R} must not exceed frame size L={self.L}")
        if self.P > self.K:
            raise ValueError(f"chunk shift P={self.P} must not exceed chunk length K={self.K}")
        if self.H % 2:
            raise ValueError(f"H must be even (bidirectional halves), got {self.H}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.max_context is not None and self.max_context < 1:
            raise ValueError("max_context must be None or >= 1")

    @property
    def chunk_samples(self):
        """Samples covered by one chunk: (K-1)·R + L."""
        return (self.K - 1) * self.R + self.L

    @property
    def hop_samples(self):
        """New samples consumed per chunk step: P·R."""
        return self.P * self.R

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper_causal(cls, **overrides):
        return cls(**{**dict(L=16, R=8, K=63, P=31, N=128, H=256,
                             num_blocks=6, causal=True), **overrides})

    @classmethod
    def paper_noncausal(cls, **overrides):
        return cls(**{**dict(L=16, R=8, K=126, P=63, N=128, H=256,
                             num_blocks=6, causal=False), **overrides})


# ---------------------------------------------------------------------------
# framing / chunking and their overlap-add inverses (all differentiable)

def unit_count(n_items, size, shift):
    """Windows of `size` every `shift` needed to cover n_items (>=1 items)."""
    return -(-max(n_items - size, 0) // shift) + 1


def _cover_grid(n_units, size, shift, limit):
    idx = np.arange(n_units)[:, None] * shift + np.arange(size)[None, :]
    return idx, idx < limit


def frames_from_signal(x, L, R):
    """Samples [M] -> frames [T, L]; frame t covers samples t·R .. t·R+L-1."""
    if L < 1 or R < 1:
        raise ValueError(f"frame size/shift must be positive, got L={L}, R={R}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D sample vector, got shape {x.shape}")
    m = x.shape[0]
    if m < 1:
        raise EmptySequenceError("cannot frame an empty signal")
    t_count = unit_count(m, L, R)
    idx, valid = _cover_grid(t_count, L, R, m)
    safe = np.where(valid, idx, 0)
    out = np.where(valid, x.data[safe], x.data.dtype.type(0))

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, safe[valid], g[valid])
        tz.accumulate(x, dx)

    return tz.record(out, (x,), bw)


def ola_frames(frames, m, R):
    """Frames [T, L] -> samples [m], dividing by per-sample cover counts."""
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    if frames.ndim != 2:
        raise ShapeError(f"expected [T, L] frames, got {frames.shape}")
    t_count, L = frames.shape
    if unit_count(m, L, R) != t_count:
        raise ShapeError(
            f"{t_count} frames of size {L}, shift {R} do not reconstruct {m} samples")
    idx, valid = _cover_grid(t_count, L, R, m)
    counts = np.bincount(idx[valid], minlength=m).astype(frames.dtype)
    safe = np.where(valid, idx, 0)

    acc = np.zeros(m, dtype=frames.dtype)
    np.add.at(acc, idx[valid], frames.data[valid])
    out = acc / counts

    def bw(g):
        gn = g / counts
        tz.accumulate(frames, np.where(valid, gn[safe], 0))

    return tz.record(out, (frames,), bw)


@dataclass
class ChunkGrid:
    """Chunked frames plus the geometry needed to invert the chunking."""

    data: Tensor                 # [J, K, F]
    frame_count: int             # T before padding
    pad_frames: int

    @property
    def num_chunks(self):
        return self.data.shape[0]


def chunk_frames(frames, K, P):
    """Frames [T, F] -> ChunkGrid [J, K, F]; chunk j starts at frame j·P."""
    if K < P or P < 1:
        raise ValueError(f"need chunk length >= shift >= 1, got K={K}, P={P}")
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    if frames.ndim != 2:
        raise ShapeError(f"expected [T, F] frames, got {frames.shape}")
    t_count, n_feat = frames.shape
    if t_count < 1:
        raise EmptySequenceError("cannot chunk an empty frame sequence")
    j_count = unit_count(t_count, K, P)
    idx, valid = _cover_grid(j_count, K, P, t_count)
    safe = np.where(valid, idx, 0)
    out = np.where(valid[..., None], frames.data[safe], frames.dtype.type(0))

    def bw(g):
        df = np.zeros_like(frames.data)
        np.add.at(df, safe[valid], g[valid])
        tz.accumulate(frames, df)

    data = tz.record(out, (frames,), bw)
    return ChunkGrid(data, t_count, (j_count - 1) * P + K - t_count)


def ola_chunks(data, t_count, P):
    """Chunks [J, K, F] -> frames [t_count, F] with count normalization."""
    data = data if isinstance(data, Tensor) else Tensor(data)
    if data.ndim != 3:
        raise ShapeError(f"expected [J, K, F] chunks, got {data.shape}")
    j_count, K, n_feat = data.shape
    if unit_count(t_count, K, P) != j_count:
        raise ShapeError(
            f"{j_count} chunks of length {K}, shift {P} do not reconstruct "
            f"{t_count} frames")
    idx, valid = _cover_grid(j_count, K, P, t_count)
    counts = np.bincount(idx[valid], minlength=t_count).astype(data.dtype)
    safe = np.where(valid, idx, 0)

    acc = np.zeros((t_count, n_feat), dtype=data.dtype)
    np.add.at(acc, idx[valid], data.data[valid])
    out = acc / counts[:, None]

    def bw(g):
        gn = g / counts[:, None]
        tz.accumulate(data, np.where(valid[..., None], gn[safe], 0))

    return tz.record(out, (data,), bw)


# ---------------------------------------------------------------------------
# dual-path block and full network

class DpSarnnBlock:
    """Intra-chunk SARNN, transpose, inter-chunk SARNN, transpose back."""

    def __init__(self, config, rng=None, dtype=np.float32):
        c = config
        common = dict(dropout_p=c.dropout_p, attention_enabled=c.attention_enabled,
                      rng=rng, dtype=dtype)
        self.causal = c.causal
        self.intra = SarnnBlock(c.N, c.H, bidirectional=True,
                                causal_attention=False, **common)
        self.inter = SarnnBlock(c.N, c.H, bidirectional=not c.causal,
                                causal_attention=c.causal, **common)

    def init(self, rng):
        self.intra.init(rng)
        self.inter.init(rng)

    def params(self):
        return (prefix_params("intra", self.intra.params())
                + prefix_params("inter", self.inter.params()))

    def forward(self, x, mode="train", rng=None):
        """x: Tensor [J, K, N] -> [J, K, N]."""
        a, _ = self.intra(x, None, mode, rng)
        b, _ = self.inter(tz.transpose_12(a), None, mode, rng)
        return tz.transpose_12(b)

    __call__ = forward

    def step(self, x, inter_state, cache):
        """Streaming: one new chunk x [1, K, N] with carried inter state.

        inter_state holds per-position LSTM state (batch K); cache is this
        block's AttentionCache. Returns ([1, K, N], new state).
        """
        if not self.causal:
            raise ValueError("streaming steps require a causal block")
        a, _ = self.intra(x, None, "eval")
        b, state = sarnn_step(self.inter, tz.transpose_12(a), inter_state, cache)
        return tz.transpose_12(b), state


class EnhancementNetwork:
    """Densely connected stack of dual-path blocks mapping noisy to clean."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        c = config
        rng = np.random.default_rng(seed)
        self.lin_in = LinearLayer(c.L, c.N, rng=rng, dtype=dtype)
        self.blocks = [DpSarnnBlock(c, rng=rng, dtype=dtype)
                       for _ in range(c.num_blocks)]
        # block b (1-based) consumes width b·N, projected back to N for b >= 2
        self.proj = [LinearLayer(b * c.N, c.N, rng=rng, dtype=dtype)
                     for b in range(2, c.num_blocks + 1)]
        self.lin_out = LinearLayer(c.N, c.L, rng=rng, dtype=dtype)

    def init_params(self, seed):
        """Redraw all parameters; same seed -> bit-identical parameters."""
        rng = np.random.default_rng(seed)
        self.lin_in.init(rng)
        for block in self.blocks:
            block.init(rng)
        for proj in self.proj:
            proj.init(rng)
        self.lin_out.init(rng)

    def params(self):
        out = prefix_params("lin_in", self.lin_in.params())
        for i, block in enumerate(self.blocks):
            out += prefix_params(f"blocks.{i}", block.params())
        for i, proj in enumerate(self.proj):
            out += prefix_params(f"proj.{i}", proj.params())
        out += prefix_params("lin_out", self.lin_out.params())
        return out

    def param_count(self):
        return param_count(self.params())

    def freeze(self):
        """Freeze every attention value gate for evaluation."""
        for block in self.blocks:
            for half in (block.intra, block.inter):
                if half.attention_enabled:
                    freeze_v_gate(half.attn)

    def _stack(self, feats, mode, rng):
        outs = []
        for i, block in enumerate(self.blocks):
            if outs:
                h = self.proj[i - 1](tz.concat_last([feats] + outs))
            else:
                h = feats
            outs.append(block(h, mode, rng))
        return outs[-1]

    def forward(self, x, mode="eval", rng=None):
        """Enhance samples [M] -> samples [M]; M must cover one frame."""
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        c = self.config
        m = x.shape[0]
        if m < c.L:
            raise SignalTooShortError(
                f"need at least L={c.L} samples, got {m}")
        frames = frames_from_signal(x, c.L, c.R)
        grid = chunk_frames(frames, c.K, c.P)
        feats = self.lin_in(grid.data)
        y = self._stack(feats, mode, rng)
        out_frames = ola_chunks(self.lin_out(y), grid.frame_count, c.P)
        return ola_frames(out_frames, m, c.R)

    __call__ = forward


def save_model(path, net):
    save_checkpoint(path, net.config.to_dict(), net.params())


def load_model(path, dtype=np.float32, freeze=True):
    """Rebuild a network from a checkpoint; returns the network."""
    config_dict, saved = load_checkpoint(path)
    config = ModelConfig.from_dict(config_dict)
    net = EnhancementNetwork(config, seed=0, dtype=dtype)
    names = [name for name, _ in net.params()]
    if list(saved) != names:
        missing = [n for n in names if n not in saved]
        extra = [n for n in saved if n not in names]
        detail = (f"missing {missing[:3]}, unexpected {extra[:3]}"
                  if missing or extra else "parameter order differs")
        raise CheckpointError(f"checkpoint does not match this config: {detail}")
    for name, param in net.params():
        arr = saved[name]
        if arr.shape != param.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arr.shape}, model {param.shape}")
        param.data[...] = arr.astype(dtype)
    if freeze:
        net.freeze()
    return net
