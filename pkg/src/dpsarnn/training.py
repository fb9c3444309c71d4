"""Training: losses, Adam, learning-rate schedule, and the epoch loop.

Three interchangeable losses, all differentiable through the tape:

* ``pcm_style`` — L1 distance between short-time spectral magnitudes of the
  estimate vs the clean target, plus the same distance between the implied
  noise estimates (mixture minus each).  Window: 512-sample periodic Hann,
  shift 256, computed with explicit DFT matrices.
* ``si_sdr`` — scale-invariant SDR, negated and shifted by its +60 dB cap
  so the minimum is 0 at a perfect estimate.
* ``l1_time`` — mean absolute sample error.

The schedule holds lr_initial for the first lr_flat_epochs epochs, then
decays exponentially per epoch, reaching lr_final exactly at the last
epoch.  Gradients are clipped jointly to a global l2 norm before each Adam
step.  Everything is seeded: shuffling, cropping, and dropout streams all
derive from TrainConfig.seed, so identical runs produce identical
checkpoints.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .audio import si_snr
from .errors import ShapeError, TrainingFault
from .network import frames_from_signal, save_model
from .tensor import Tensor

STFT_SIZE = 512
STFT_SHIFT = 256
_LN10 = math.log(10.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 8
    utterance_seconds: float = 4.0
    lr_initial: float = 2e-4
    lr_final: float = 2e-5
    lr_flat_epochs: int = 5
    clip_norm: float = 3.0
    loss_kind: str = "pcm_style"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.lr_flat_epochs <= self.epochs:
            raise ValueError("lr_flat_epochs must be within [0, epochs]")
        if min(self.lr_initial, self.lr_final, self.clip_norm) <= 0:
            raise ValueError("rates and clip_norm must be positive")
        if self.loss_kind not in ("pcm_style", "si_sdr", "l1_time"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")


def lr_at_epoch(cfg, epoch):
    """Learning rate for 1-based epoch: flat, then exponential decay."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if epoch <= cfg.lr_flat_epochs or cfg.epochs == cfg.lr_flat_epochs:
        return cfg.lr_initial
    decay = (cfg.lr_final / cfg.lr_initial) ** (1.0 / (cfg.epochs - cfg.lr_flat_epochs))
    return cfg.lr_initial * decay ** (epoch - cfg.lr_flat_epochs)


# ---------------------------------------------------------------------------
# losses

def _dft_pieces(dtype):
    """(hann window [1, S], cos [S, S/2+1], -sin [S, S/2+1]) for the STFT."""
    n = np.arange(STFT_SIZE)
    window = 0.5 - 0.5 * np.cos(2.0 * math.pi * n / STFT_SIZE)
    k = np.arange(STFT_SIZE // 2 + 1)
    angle = 2.0 * math.pi * np.outer(n, k) / STFT_SIZE
    return (window[None, :].astype(dtype), np.cos(angle).astype(dtype),
            (-np.sin(angle)).astype(dtype))


_DFT_CACHE = {}


def stft_magnitude(x, eps=1e-12):
    """x: Tensor [M] -> magnitude spectrogram Tensor [T, S/2+1]."""
    key = str(x.dtype)
    if key not in _DFT_CACHE:
        _DFT_CACHE[key] = tuple(Tensor(a) for a in _dft_pieces(x.dtype))
    window, cos_m, msin_m = _DFT_CACHE[key]
    frames = tz.mul(frames_from_signal(x, STFT_SIZE, STFT_SHIFT), window)
    re = tz.matmul(frames, cos_m)
    im = tz.matmul(frames, msin_m)
    return tz.sqrt(tz.add(tz.add(tz.mul(re, re), tz.mul(im, im)), eps))


def _as_tensor_pair(s_hat, s, x):
    s_hat = s_hat if isinstance(s_hat, Tensor) else Tensor(s_hat)
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=s_hat.dtype))
    x = x if isinstance(x, Tensor) else (
        None if x is None else Tensor(np.asarray(x, dtype=s_hat.dtype)))
    if s_hat.shape != s.shape or (x is not None and x.shape != s.shape):
        raise ShapeError(
            f"losses need equal lengths, got {s_hat.shape}, {s.shape}"
            + (f", {x.shape}" if x is not None else ""))
    return s_hat, s, x


def pcm_style_loss(s_hat, s, x):
    """Spectral-magnitude L1 on the speech and implied noise estimates."""
    s_hat, s, x = _as_tensor_pair(s_hat, s, x)
    speech_term = tz.mean(tz.absolute(tz.sub(stft_magnitude(s_hat), stft_magnitude(s))))
    n_hat = tz.sub(x, s_hat)
    n_true = tz.sub(x, s)
    noise_term = tz.mean(tz.absolute(tz.sub(stft_magnitude(n_hat), stft_magnitude(n_true))))
    return tz.add(speech_term, noise_term)


def si_sdr_loss(s_hat, s, x=None, cap_db=60.0):
    """10·log10(1 + 10^(cap/10) · residual/target power); 0 at perfect."""
    s_hat, s, _ = _as_tensor_pair(s_hat, s, x)
    s_energy = float(np.dot(s.data, s.data))
    if s_energy == 0.0:
        raise ValueError("zero-energy target in si_sdr loss")
    e = tz.sub(s_hat, tz.mean(s_hat))
    r = Tensor(s.data - s.data.mean())
    alpha = tz.div(tz.tsum(tz.mul(e, r)), float(np.dot(r.data, r.data)))
    # alpha is a scalar tensor; broadcast-scale the reference
    target = tz.mul(r, alpha)
    residual = tz.sub(e, target)
    p_t = tz.add(tz.tsum(tz.mul(target, target)), 1e-30)
    p_r = tz.tsum(tz.mul(residual, residual))
    ratio = tz.div(p_r, p_t)
    inner = tz.add(tz.mul(ratio, 10.0 ** (cap_db / 10.0)), 1.0)
    return tz.mul(tz.log(inner), 10.0 / _LN10)


def l1_time_loss(s_hat, s, x=None):
    s_hat, s, _ = _as_tensor_pair(s_hat, s, x)
    return tz.mean(tz.absolute(tz.sub(s_hat, s)))


_LOSSES = {"pcm_style": pcm_style_loss, "si_sdr": si_sdr_loss, "l1_time": l1_time_loss}


def loss(kind, s_hat, s, x):
    """Dispatch: kind in {pcm_style, si_sdr, l1_time}; x is the mixture."""
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}") from None
    return fn(s_hat, s, x)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Standard Adam with bias correction over a named parameter list."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.items = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.items]
        self.v = [np.zeros_like(p.data) for _, p in self.items]

    def zero_grad(self):
        for _, p in self.items:
            p.grad = None

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for (name, p), m, v in zip(self.items, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise TrainingFault(f"non-finite gradient in parameter {name!r}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# epoch loop

@dataclass
class TrainResult:
    best_path: str | None
    best_score: float
    best_epoch: int
    final_loss: float
    first_loss: float
    history: list = field(default_factory=list)  # (epoch, lr, mean loss, val score)


def _crop_or_pad_pair(mix_s, clean_s, target, rng):
    """Same random crop (or tail zero-pad) applied to both signals."""
    if mix_s.shape[0] != clean_s.shape[0]:
        raise ValueError("mixture and clean target lengths differ")
    n = mix_s.shape[0]
    if n == target:
        return mix_s, clean_s
    if n > target:
        off = int(rng.integers(0, n - target + 1))
        return mix_s[off:off + target], clean_s[off:off + target]
    pad = target - n
    return (np.concatenate([mix_s, np.zeros(pad, dtype=mix_s.dtype)]),
            np.concatenate([clean_s, np.zeros(pad, dtype=clean_s.dtype)]))


def _pair_arrays(pair):
    if hasattr(pair, "mixture"):
        return pair.mixture.samples, pair.clean.samples
    mix_s, clean_s = pair
    return np.asarray(mix_s, np.float32), np.asarray(clean_s, np.float32)


def train(net, train_pairs, val_pairs, cfg, out_dir=None, log_file=None,
          on_epoch=None):
    """Run the full loop; returns a TrainResult with the best checkpoint.

    train_pairs / val_pairs: MixturePair objects or (mixture, clean) sample
    tuples.  When out_dir is set, writes epoch{E}.ckpt, best.ckpt and
    train_log.tsv there.
    """
    if not train_pairs or not val_pairs:
        raise ValueError("training and validation sets must be non-empty")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(seeds[0])
    crop_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])
    target_len = int(round(cfg.utterance_seconds * 16000))

    opt = Adam(net.params())
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if log_file is None:
            log_file = os.path.join(out_dir, "train_log.tsv")
    if log_file is not None:
        log_fh = open(log_file, "w", encoding="utf-8")

    step = 0
    first_loss = None
    last_loss = math.nan
    best_score = -math.inf
    best_epoch = 0
    best_path = os.path.join(out_dir, "best.ckpt") if out_dir else None
    history = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = lr_at_epoch(cfg, epoch)
            order = shuffle_rng.permutation(len(train_pairs))
            epoch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                step += 1
                with tz.Tape():
                    total = None
                    for idx in batch:
                        mix_s, clean_s = _pair_arrays(train_pairs[idx])
                        mix_c, clean_c = _crop_or_pad_pair(
                            mix_s, clean_s, target_len, crop_rng)
                        out = net.forward(Tensor(mix_c), mode="train", rng=dropout_rng)
                        item = loss(cfg.loss_kind, out, clean_c, mix_c)
                        total = item if total is None else tz.add(total, item)
                    total = tz.mul(total, 1.0 / len(batch))
                    value = float(total.data)
                    if not math.isfinite(value):
                        raise TrainingFault(f"loss diverged (non-finite) at step {step}")
                    tz.backward(total)
                tz.clip_grad_norm([p for _, p in opt.items], cfg.clip_norm)
                opt.step(lr)
                opt.zero_grad()
                if first_loss is None:
                    first_loss = value
                last_loss = value
                epoch_losses.append(value)
                if log_fh:
                    log_fh.write(f"{step}\t{epoch}\t{lr:.8g}\t{value:.8g}\n")
                    log_fh.flush()
            score = validate(net, val_pairs)
            history.append((epoch, lr, float(np.mean(epoch_losses)), score))
            if out_dir is not None:
                save_model(os.path.join(out_dir, f"epoch{epoch}.ckpt"), net)
            if score > best_score:
                best_score = score
                best_epoch = epoch
                if best_path is not None:
                    save_model(best_path, net)
            if on_epoch is not None:
                on_epoch(epoch, lr, float(np.mean(epoch_losses)), score)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(best_path, best_score, best_epoch, last_loss,
                       first_loss if first_loss is not None else math.nan, history)


def validate(net, val_pairs):
    """Mean SI-SNR (dB) of the frozen network over the validation pairs."""
    net.freeze()
    scores = []
    for pair in val_pairs:
        mix_s, clean_s = _pair_arrays(pair)
        out = net.forward(Tensor(mix_s), mode="eval")
        scores.append(si_snr(out.data, clean_s))
    return float(np.mean(scores))
