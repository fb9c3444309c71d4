"""Real-time dual-path speech enhancement in the time domain.

A self-contained stack: dense tensors with reverse-mode autodiff, LSTM
kernels with a compiled fast path, recurrent blocks with gated single-
headed attention, a chunked dual-path enhancement network, training
utilities, synthetic audio data, and a chunk-streaming inference engine
with a latency benchmark.
"""

from . import backend
from .audio import (AudioBuffer, MixtureSpec, mix, read_wav, si_snr,
                    si_snr_improvement, synth_dataset, write_wav)
from .errors import DpsarnnError
from .layers import BiLSTMLayer, LinearLayer, LSTMLayer, LSTMState
from .network import (ChunkGrid, EnhancementNetwork, ModelConfig,
                      chunk_frames, frames_from_signal, load_model,
                      ola_chunks, ola_frames, save_model)
from .sarnn import AttentionBlock, FeedForwardBlock, SarnnBlock, freeze_v_gate
from .streaming import LatencyReport, StreamEngine, bench, stream_enhance
from .tensor import Tape, Tensor, backward
from .training import Adam, TrainConfig, loss, lr_at_epoch, train

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "MixtureSpec", "mix", "read_wav", "si_snr",
    "si_snr_improvement", "synth_dataset", "write_wav",
    "DpsarnnError",
    "BiLSTMLayer", "LinearLayer", "LSTMLayer", "LSTMState",
    "ChunkGrid", "EnhancementNetwork", "ModelConfig", "chunk_frames",
    "frames_from_signal", "load_model", "ola_chunks", "ola_frames",
    "save_model",
    "AttentionBlock", "FeedForwardBlock", "SarnnBlock", "freeze_v_gate",
    "LatencyReport", "StreamEngine", "bench", "stream_enhance",
    "Tape", "Tensor", "backward",
    "Adam", "TrainConfig", "loss", "lr_at_epoch", "train",
    "backend", "__version__",
]
