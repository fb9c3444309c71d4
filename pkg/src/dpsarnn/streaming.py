"""Chunk-by-chunk causal inference with carried state.

A :class:`StreamEngine` wraps a causal network and consumes raw samples.
Every hop of P·R new samples completes a (K-1)·R+L-sample chunk window
(512 samples / 32 ms at the default geometry, hop 248 samples / 15.5 ms).
Each completed chunk runs once through the network using, per dual-path
block, the carried per-position LSTM state and a growing key/value cache
for the causal attention — so the j-th chunk sees exactly the history the
offline causal network sees.

Output bookkeeping mirrors the offline double overlap-add: chunk outputs
are summed into per-frame accumulators; a frame is final once every chunk
covering it has run, and a sample is emitted once every frame covering it
is final.  The flush pads the last chunk with zero *frame rows* (never
frames built from zero-padded samples — those could leak real samples into
frames the offline path never builds), then drains the accumulators
trimmed to the true input length.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import StreamClosedError, StreamingUnsupportedError
from .layers import LSTMState
from .network import unit_count
from .sarnn import AttentionCache
from .tensor import Tensor


def cover_counts(pos, size, shift, total_units=None):
    """How many [size]-windows at stride [shift] cover each position.

    pos: int array of positions; total_units caps the window index (the
    finite-signal tail where fewer windows exist).
    """
    pos = np.asarray(pos)
    lo = np.maximum(0, -(-(pos - size + 1) // shift))
    hi = pos // shift
    if total_units is not None:
        hi = np.minimum(hi, total_units - 1)
    return hi - lo + 1


class _GrowArray:
    """Append-only numpy buffer with amortized-doubling capacity."""

    def __init__(self, width=None, dtype=np.float32, cap=4096):
        shape = (cap,) if width is None else (cap, width)
        self.data = np.zeros(shape, dtype=dtype)
        self.length = 0

    def ensure(self, n):
        cap = self.data.shape[0]
        if n <= cap:
            return
        new_cap = max(2 * cap, n)
        new = np.zeros((new_cap,) + self.data.shape[1:], dtype=self.data.dtype)
        new[:cap] = self.data
        self.data = new

    def view(self, start, stop):
        return self.data[start:stop]


class StreamEngine:
    """Stateful push/flush wrapper around a causal EnhancementNetwork."""

    def __init__(self, net, max_context=None):
        if not net.config.causal:
            raise StreamingUnsupportedError(
                "streaming requires a causal model configuration")
        self.net = net
        c = net.config
        self.config = c
        self.chunk_samples = c.chunk_samples      # (K-1)·R + L
        self.hop_samples = c.hop_samples          # P·R
        self.max_context = c.max_context if max_context is None else max_context
        net.freeze()

        self._buf = _GrowArray(dtype=np.float32, cap=4 * self.chunk_samples)
        self._frame_sums = _GrowArray(width=c.L, cap=4 * c.K)
        self._sample_sums = _GrowArray(dtype=np.float32, cap=8 * self.chunk_samples)
        self._states = [None] * c.num_blocks      # per-block inter LSTMState
        self._caches = [AttentionCache(c.K, c.N, max_context=self.max_context)
                        for _ in range(c.num_blocks)]
        self.chunks_processed = 0
        self._frames_final = 0
        self._emitted = 0
        self._closed = False
        self.chunk_times_ms = []                  # wall time per processed chunk
        self.net_times_ms = []                    # network-only portion

    # -- input buffering ----------------------------------------------------

    @property
    def samples_pushed(self):
        return self._buf.length

    def push(self, samples):
        """Feed samples (any block size); returns newly final output samples."""
        if self._closed:
            raise StreamClosedError("push after flush")
        samples = np.asarray(samples, dtype=np.float32).reshape(-1)
        if samples.size:
            self._buf.ensure(self._buf.length + samples.size)
            self._buf.data[self._buf.length:self._buf.length + samples.size] = samples
            self._buf.length += samples.size
        emitted = []
        while (self.chunks_processed * self.hop_samples + self.chunk_samples
               <= self._buf.length):
            emitted.append(self._run_chunk(flush_frame_limit=None))
        if not emitted:
            return np.empty(0, dtype=np.float32)
        return np.concatenate(emitted)

    def flush(self):
        """Complete the final partial chunk(s) and drain all output."""
        if self._closed:
            raise StreamClosedError("stream already flushed")
        self._closed = True
        m = self._buf.length
        if m == 0:
            return np.empty(0, dtype=np.float32)
        c = self.config
        t_total = unit_count(m, c.L, c.R)
        j_total = unit_count(t_total, c.K, c.P)
        while self.chunks_processed < j_total:
            self._run_chunk(flush_frame_limit=t_total)
        # finalize remaining frames with the finite-signal cover counts
        self._finalize_frames(t_total, j_total)
        return self._emit_samples(m, t_total)

    # -- chunk processing ---------------------------------------------------

    def _chunk_frames(self, j, flush_frame_limit):
        """Frame rows [K, L] for chunk j; zero rows beyond the frame total."""
        c = self.config
        rows = np.zeros((c.K, c.L), dtype=np.float32)
        m = self._buf.length
        for k in range(c.K):
            t = j * c.P + k
            if flush_frame_limit is not None and t >= flush_frame_limit:
                break  # zero rows: frames the offline path never builds
            start = t * c.R
            if start >= m:
                break
            piece = self._buf.view(start, min(start + c.L, m))
            rows[k, :piece.shape[0]] = piece
        return rows

    def _run_chunk(self, flush_frame_limit):
        t0 = time.perf_counter()
        c = self.config
        j = self.chunks_processed
        rows = self._chunk_frames(j, flush_frame_limit)

        t_net0 = time.perf_counter()
        x = Tensor(rows[None])                       # [1, K, L]
        feats = self.net.lin_in(x)
        outs = []
        for i, block in enumerate(self.net.blocks):
            if outs:
                h = self.net.proj[i - 1](tz.concat_last([feats] + outs))
            else:
                h = feats
            if self._states[i] is None:
                self._states[i] = LSTMState.zeros(
                    block.inter.hidden, batch=c.K, dtype=np.float32)
            y, self._states[i] = block.step(h, self._states[i], self._caches[i])
            outs.append(y)
        chunk_out = self.net.lin_out(outs[-1]).data[0]  # [K, L]
        t_net1 = time.perf_counter()

        base = j * c.P
        self._frame_sums.ensure(base + c.K)
        self._frame_sums.data[base:base + c.K] += chunk_out
        self._frame_sums.length = max(self._frame_sums.length, base + c.K)
        self.chunks_processed += 1

        out = np.empty(0, dtype=np.float32)
        if flush_frame_limit is None:
            # frames < (j+1)·P now have every covering chunk processed
            self._finalize_frames(self.chunks_processed * c.P, None)
            out = self._emit_samples(self._frames_final * c.R, None)
        t1 = time.perf_counter()
        self.chunk_times_ms.append((t1 - t0) * 1000.0)
        self.net_times_ms.append((t_net1 - t_net0) * 1000.0)
        return out

    def _finalize_frames(self, upto, j_total):
        """Normalize frames [frames_final, upto) and scatter into samples."""
        c = self.config
        start, stop = self._frames_final, upto
        if stop <= start:
            return
        t_idx = np.arange(start, stop)
        counts = cover_counts(t_idx, c.K, c.P, j_total).astype(np.float32)
        final_rows = self._frame_sums.view(start, stop) / counts[:, None]
        self._sample_sums.ensure((stop - 1) * c.R + c.L)
        for row, t in zip(final_rows, t_idx):
            s0 = t * c.R
            self._sample_sums.data[s0:s0 + c.L] += row
        self._frames_final = stop

    def _emit_samples(self, upto, t_total):
        c = self.config
        start, stop = self._emitted, upto
        if stop <= start:
            return np.empty(0, dtype=np.float32)
        s_idx = np.arange(start, stop)
        counts = cover_counts(s_idx, c.L, c.R, t_total).astype(np.float32)
        out = self._sample_sums.view(start, stop) / counts
        self._emitted = stop
        return out.astype(np.float32, copy=True)


def stream_enhance(net, samples, max_context=None):
    """Push a whole signal through a fresh engine; returns enhanced samples."""
    engine = StreamEngine(net, max_context=max_context)
    head = engine.push(samples)
    tail = engine.flush()
    return np.concatenate([head, tail])


# ---------------------------------------------------------------------------
# latency benchmark

CHUNK_MS = 32.0
SHIFT_MS = 15.5
PAPER_REFERENCE_MS = 7.9  # mean per 32 ms chunk on a 2.4 GHz server CPU


@dataclass
class LatencyReport:
    chunk_times_ms: list
    net_times_ms: list
    chunk_duration_ms: float = CHUNK_MS
    chunk_shift_ms: float = SHIFT_MS
    context_capped: bool = False
    warmup_chunks: int = 0

    @property
    def count(self):
        return len(self.chunk_times_ms)

    @property
    def mean_ms(self):
        return float(np.mean(self.chunk_times_ms))

    @property
    def p95_ms(self):
        return float(np.percentile(self.chunk_times_ms, 95))

    @property
    def max_ms(self):
        return float(np.max(self.chunk_times_ms))

    @property
    def net_mean_ms(self):
        return float(np.mean(self.net_times_ms))

    @property
    def realtime_pass(self):
        return self.mean_ms < self.chunk_shift_ms and self.p95_ms < self.chunk_shift_ms

    def machine_lines(self):
        return [
            f"mean_ms={self.mean_ms:.4f}",
            f"p95_ms={self.p95_ms:.4f}",
            f"max_ms={self.max_ms:.4f}",
            f"net_mean_ms={self.net_mean_ms:.4f}",
            f"chunks={self.count}",
            f"context_capped={1 if self.context_capped else 0}",
            f"realtime_pass={1 if self.realtime_pass else 0}",
        ]

    def human_text(self):
        lines = [
            f"chunks timed: {self.count} (after {self.warmup_chunks} warmup)",
            f"chunk duration: {self.chunk_duration_ms:.1f} ms, "
            f"shift: {self.chunk_shift_ms:.1f} ms",
            f"per-chunk wall time: mean {self.mean_ms:.2f} ms, "
            f"p95 {self.p95_ms:.2f} ms, max {self.max_ms:.2f} ms",
            f"network compute only: mean {self.net_mean_ms:.2f} ms",
            f"real-time (mean and p95 < {self.chunk_shift_ms:.1f} ms): "
            f"{'PASS' if self.realtime_pass else 'FAIL'}",
            f"reference: {PAPER_REFERENCE_MS} ms mean on a 2.4 GHz server core "
            f"(reported, not asserted)",
        ]
        if self.context_capped:
            lines.append("note: attention context capped; offline equivalence "
                         "does not hold exactly")
        return "\n".join(lines)


def bench(net, seconds, warmup_chunks=1, seed=0, max_context=None):
    """Feed seeded noise through a stream and time every chunk.

    Chunk count equals floor(seconds·16000/hop); the tail is zero-padded so
    the last hop still completes a full chunk window.
    """
    if seconds < 1:
        raise ValueError("bench needs at least one second of audio")
    if warmup_chunks < 1:
        raise ValueError("need at least one warmup chunk")
    engine = StreamEngine(net, max_context=max_context)
    hop, win = engine.hop_samples, engine.chunk_samples
    n = int(seconds * 16000)
    total_chunks = n // hop
    if total_chunks <= warmup_chunks:
        raise ValueError("audio too short for the requested warmup")
    padded = (total_chunks - 1) * hop + win
    x = 0.1 * np.random.default_rng(seed).standard_normal(padded).astype(np.float32)
    pos = 0
    for j in range(total_chunks):
        need = win if j == 0 else hop
        engine.push(x[pos:pos + need])
        pos += need
    assert engine.chunks_processed == total_chunks
    return LatencyReport(
        chunk_times_ms=engine.chunk_times_ms[warmup_chunks:],
        net_times_ms=engine.net_times_ms[warmup_chunks:],
        context_capped=engine.max_context is not None,
        warmup_chunks=warmup_chunks)
