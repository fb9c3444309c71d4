"""Audio I/O and synthetic data: WAV codec, SNR mixing, dataset generation.

Everything operates on mono 16 kHz float buffers in the nominal [-1, 1]
range.  The WAV codec is deliberately strict: PCM-16 or IEEE float-32,
mono, 16 kHz only, with a distinct error per rejection reason so callers
can report exactly what was wrong with a file.

The synthetic corpus stands in for real speech at desk scale: "clean"
utterances are harmonic tone bursts with speech-like envelopes and pauses,
"noise" is white, pink, or a babble surrogate (a crowd of detuned,
amplitude-wandering tones), mixed at a requested SNR that is exact by
construction.
"""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (MalformedWavError, UnsupportedChannelsError,
                     UnsupportedCodecError, UnsupportedRateError)

SAMPLE_RATE = 16000
SI_SNR_CAP_DB = 60.0

NOISE_KINDS = ("white", "pink", "babble")


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    role: str = "clean"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioBuffer needs a non-empty 1-D sample vector")
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedRateError(
                f"only {SAMPLE_RATE} Hz is supported, got {self.sample_rate}")
        if self.role not in ("clean", "noise", "mixture", "enhanced"):
            raise ValueError(f"unknown role {self.role!r}")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate


# ---------------------------------------------------------------------------
# WAV codec (RIFF/WAVE; PCM-16 and IEEE float-32, mono, 16 kHz)

_PCM = 1
_IEEE_FLOAT = 3


def write_wav(path, buf, codec="float32"):
    """Write an AudioBuffer; codec is 'float32' (default) or 'int16'."""
    x = buf.samples
    if codec == "float32":
        payload = x.astype("<f4").tobytes()
        fmt_tag, bits = _IEEE_FLOAT, 32
    elif codec == "int16":
        clipped = np.clip(x, -1.0, 32767.0 / 32768.0)
        payload = np.round(clipped * 32768.0).astype("<i2").tobytes()
        fmt_tag, bits = _PCM, 16
    else:
        raise ValueError(f"codec must be 'float32' or 'int16', got {codec!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, 1, SAMPLE_RATE,
                      SAMPLE_RATE * block, block, bits)
    chunks = [(b"fmt ", fmt)]
    if fmt_tag == _IEEE_FLOAT:
        chunks.append((b"fact", struct.pack("<I", len(x))))
    chunks.append((b"data", payload))
    body = b"WAVE" + b"".join(
        cid + struct.pack("<I", len(c)) + c + (b"\x00" if len(c) % 2 else b"")
        for cid, c in chunks)
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", len(body)) + body)


def read_wav(path):
    """Read a WAV file into an AudioBuffer (strict format validation)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise MalformedWavError(f"{path}: fmt chunk too small ({size} bytes)")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size % 2)
    if fmt is None or data is None:
        raise MalformedWavError(f"{path}: missing fmt or data chunk")
    fmt_tag, channels, rate, _byte_rate, _block, bits = fmt
    if not ((fmt_tag == _PCM and bits == 16) or (fmt_tag == _IEEE_FLOAT and bits == 32)):
        raise UnsupportedCodecError(
            f"{path}: unsupported codec (format tag {fmt_tag}, {bits}-bit); "
            f"need PCM-16 or IEEE float-32")
    if rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"{path}: unsupported sample rate {rate}")
    if channels != 1:
        raise UnsupportedChannelsError(f"{path}: {channels} channels, need mono")
    if fmt_tag == _PCM:
        if len(data) % 2:
            raise MalformedWavError(f"{path}: odd PCM-16 data length")
        samples = np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0
    else:
        if len(data) % 4:
            raise MalformedWavError(f"{path}: float-32 data length not a multiple of 4")
        samples = np.frombuffer(data, dtype="<f4").astype(np.float32)
    if samples.size == 0:
        raise MalformedWavError(f"{path}: empty data chunk")
    return AudioBuffer(samples, SAMPLE_RATE)


# ---------------------------------------------------------------------------
# mixing and the SI-SNR metric

@dataclass(frozen=True)
class MixtureSpec:
    snr_db: float
    noise_offset: int = 0
    seed: int = 0


def rms(x):
    return math.sqrt(float(np.mean(np.asarray(x, dtype=np.float64) ** 2)))


def mix(speech, noise, spec):
    """speech + gain·noise_segment at exactly spec.snr_db; returns mixture."""
    s = speech.samples.astype(np.float64)
    off = spec.noise_offset
    seg = noise.samples[off:off + len(s)].astype(np.float64)
    if seg.size < s.size:
        raise ValueError(
            f"noise segment from offset {off} has {seg.size} samples; "
            f"need {s.size}")
    rs, rn = rms(s), rms(seg)
    if rs == 0.0:
        raise ValueError("zero-energy speech cannot set an SNR")
    if rn == 0.0:
        raise ValueError("zero-energy noise segment cannot set an SNR")
    gain = rs / (rn * 10.0 ** (spec.snr_db / 20.0))
    x = s + gain * seg
    return AudioBuffer(x.astype(np.float32), role="mixture")


def si_snr(estimate, reference):
    """Scale-invariant SNR in dB, capped at +60; numpy arrays or buffers."""
    e = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    r = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {r.shape}")
    e = e - e.mean()
    r = r - r.mean()
    denom = float(np.dot(r, r))
    if denom == 0.0:
        raise ValueError("zero-energy reference")
    target = (float(np.dot(e, r)) / denom) * r
    residual = e - target
    p_t = float(np.dot(target, target))
    p_r = float(np.dot(residual, residual))
    if p_t == 0.0:
        return -SI_SNR_CAP_DB  # estimate carries no target component
    if p_r == 0.0:
        return SI_SNR_CAP_DB
    return min(SI_SNR_CAP_DB, max(-SI_SNR_CAP_DB, 10.0 * math.log10(p_t / p_r)))


def si_snr_improvement(enhanced, mixture, clean):
    """SI-SNR(enhanced, clean) - SI-SNR(mixture, clean), in dB."""
    return si_snr(enhanced, clean) - si_snr(mixture, clean)


# ---------------------------------------------------------------------------
# synthetic corpus

SNR_CHOICES_DB = (-5, -4, -3, -2, -1, 0)


def synth_clean(duration_s, rng):
    """Speech-like harmonic utterance; returns (samples float32, f0 Hz).

    A fixed fundamental per utterance keeps the long-window spectrum peaked
    exactly at f0; syllable envelopes and pauses give it speech-like
    amplitude structure.
    """
    n = int(round(duration_s * SAMPLE_RATE))
    f0 = float(rng.uniform(100.0, 300.0))
    t = np.arange(n, dtype=np.float64) / SAMPLE_RATE
    voiced = np.zeros(n)
    for k in range(1, 9):
        voiced += (1.0 / k) * np.sin(2.0 * math.pi * k * f0 * t + float(rng.uniform(0, 2 * math.pi)))
    envelope = np.zeros(n)
    pos = 0
    while pos < n:
        syllable = int(rng.uniform(0.15, 0.35) * SAMPLE_RATE)
        gap = int(rng.uniform(0.03, 0.12) * SAMPLE_RATE)
        seg = min(syllable, n - pos)
        # raised-cosine bump per syllable
        envelope[pos:pos + seg] = float(rng.uniform(0.5, 1.0)) * (
            0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(seg) / max(seg, 1)))
        pos += syllable + gap
    out = voiced * envelope
    peak = np.abs(out).max()
    if peak > 0:
        out *= 0.5 / peak
    return out.astype(np.float32), f0


def synth_noise(duration_s, kind, rng):
    """Seeded noise: 'white', 'pink' (1/f-shaped), or 'babble' surrogate."""
    n = int(round(duration_s * SAMPLE_RATE))
    if kind == "white":
        out = rng.standard_normal(n)
    elif kind == "pink":
        white = rng.standard_normal(n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
        freqs[0] = freqs[1] if n > 1 else 1.0
        out = np.fft.irfft(spectrum / np.sqrt(freqs), n=n)
    elif kind == "babble":
        t = np.arange(n, dtype=np.float64) / SAMPLE_RATE
        out = np.zeros(n)
        for _ in range(12):
            f = float(rng.uniform(80.0, 1200.0))
            phase = float(rng.uniform(0, 2 * math.pi))
            # slow random amplitude wander per talker
            knots = rng.uniform(0.0, 1.0, size=max(int(duration_s * 4) + 2, 2))
            amp = np.interp(np.linspace(0, len(knots) - 1, n), np.arange(len(knots)), knots)
            out += amp * np.sin(2.0 * math.pi * f * t + phase)
    else:
        raise ValueError(f"unknown noise kind {kind!r}; choose from {NOISE_KINDS}")
    peak = np.abs(out).max()
    if peak > 0:
        out = out * (0.5 / peak)
    return out.astype(np.float32)


@dataclass
class MixturePair:
    mixture: AudioBuffer
    clean: AudioBuffer
    snr_db: float
    seed: int
    noise_kind: str = "white"
    f0: float = 0.0


def synth_pair(duration_s, seed):
    """One (mixture, clean) pair, fully determined by its seed."""
    rng = np.random.default_rng(seed)
    clean_samples, f0 = synth_clean(duration_s, rng)
    kind = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
    noise_samples = synth_noise(duration_s, kind, rng)
    snr_db = float(SNR_CHOICES_DB[int(rng.integers(len(SNR_CHOICES_DB)))])
    clean = AudioBuffer(clean_samples, role="clean")
    noise = AudioBuffer(noise_samples, role="noise")
    mixture = mix(clean, noise, MixtureSpec(snr_db=snr_db, noise_offset=0, seed=seed))
    return MixturePair(mixture, clean, snr_db, seed, kind, f0)


def pair_seeds(master_seed, count):
    """Stable per-pair sub-seeds derived from one master seed."""
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(count)]


def synth_dataset(count, duration_s, seed):
    """count in-memory (mixture, clean) pairs, deterministic by seed."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return [synth_pair(duration_s, s) for s in pair_seeds(seed, count)]


# ---------------------------------------------------------------------------
# on-disk datasets: WAV pairs plus a tab-separated manifest

@dataclass(frozen=True)
class ManifestEntry:
    mixture_path: str
    clean_path: str
    snr_db: float
    seed: int


def write_dataset(out_dir, pairs):
    """Write mix_/clean_ WAVs and manifest.tsv; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as f:
        for i, pair in enumerate(pairs):
            mix_path = os.path.join(out_dir, f"mix_{i:05d}.wav")
            clean_path = os.path.join(out_dir, f"clean_{i:05d}.wav")
            write_wav(mix_path, pair.mixture)
            write_wav(clean_path, pair.clean)
            f.write(f"{mix_path}\t{clean_path}\t{pair.snr_db:g}\t{pair.seed}\n")
    return manifest


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{line_no}: expected 4 tab-separated fields")
            entries.append(ManifestEntry(parts[0], parts[1], float(parts[2]), int(parts[3])))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries


def load_pairs(manifest_path):
    """Read WAVs referenced by a manifest into MixturePair objects."""
    pairs = []
    for e in read_manifest(manifest_path):
        pairs.append(MixturePair(
            mixture=read_wav(e.mixture_path),
            clean=read_wav(e.clean_path),
            snr_db=e.snr_db,
            seed=e.seed))
    return pairs
