"""Exception types shared across the package."""


class DpsarnnError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(DpsarnnError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(DpsarnnError, RuntimeError):
    """Backward pass requested on a detached or already-consumed tape."""


class DegenerateRowError(DpsarnnError, ValueError):
    """A softmax row contains no finite entry."""


class NumericFault(DpsarnnError, FloatingPointError):
    """A forward or training step produced non-finite values."""


class FreezeRequiredError(DpsarnnError, RuntimeError):
    """Eval-mode attention was called before the value gate was frozen."""


class EmptySequenceError(DpsarnnError, ValueError):
    """A recurrent layer received a zero-length sequence."""


class SignalTooShortError(DpsarnnError, ValueError):
    """The input signal is shorter than one analysis frame."""


class TrainingFault(DpsarnnError, RuntimeError):
    """Training aborted (NaN loss or NaN gradient)."""


class StreamClosedError(DpsarnnError, RuntimeError):
    """push() was called on a flushed stream engine."""


class StreamingUnsupportedError(DpsarnnError, ValueError):
    """Chunk streaming requires a causal model."""


class WavError(DpsarnnError, ValueError):
    """Base class for WAV codec failures."""


class MalformedWavError(WavError):
    """Header or chunk structure could not be parsed."""


class UnsupportedCodecError(WavError):
    """Sample format other than PCM-16 or IEEE float-32."""


class UnsupportedRateError(WavError):
    """Sample rate other than 16 kHz."""


class UnsupportedChannelsError(WavError):
    """Non-mono audio."""


class CheckpointError(DpsarnnError, ValueError):
    """Checkpoint file is malformed or does not match the model."""
