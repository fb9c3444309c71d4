"""Command-line interface.

Subcommands:

* ``synth-data`` — generate a synthetic (mixture, clean) WAV corpus + manifest
* ``train``      — train a model from a JSON config and manifest directories
* ``enhance``    — enhance one WAV file (offline, or --streaming for causal)
* ``stream``     — live mode: float32 samples stdin -> enhanced float32 stdout
* ``bench``      — per-chunk latency benchmark with a real-time verdict
* ``params``     — exact trainable-parameter count for a config
* ``eval``       — SI-SNR improvement table over a manifest

All errors print a one-line message to stderr and exit nonzero.  Compute is
pinned to one thread: the real-time contract and reproducibility are both
defined single-threaded.
"""

import argparse
import json
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import backend
from .audio import (load_pairs, read_wav, si_snr_improvement, synth_dataset,
                    write_dataset, write_wav, AudioBuffer)
from .errors import DpsarnnError
from .network import EnhancementNetwork, ModelConfig, load_model
from .streaming import StreamEngine, bench as run_bench, stream_enhance
from .training import TrainConfig, train


def _load_config_file(path):
    """JSON file -> (ModelConfig, TrainConfig); flat files mean model-only."""
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if "model" in data or "train" in data:
        model_d = data.get("model", {})
        train_d = data.get("train", {})
    else:
        model_d, train_d = data, {}
    model = ModelConfig.from_dict(model_d)
    try:
        train_cfg = TrainConfig(**train_d)
    except TypeError as e:
        raise ValueError(f"bad train section in {path}: {e}") from e
    return model, train_cfg


def _manifest_path(path):
    if os.path.isdir(path):
        return os.path.join(path, "manifest.tsv")
    return path


def cmd_synth_data(args):
    pairs = synth_dataset(args.count, args.duration, args.seed)
    manifest = write_dataset(args.out, pairs)
    print(f"wrote {len(pairs)} pairs; manifest: {manifest}")
    return 0


def cmd_train(args):
    model_cfg, train_cfg = _load_config_file(args.config)
    train_pairs = load_pairs(_manifest_path(args.data))
    val_pairs = load_pairs(_manifest_path(args.val))
    net = EnhancementNetwork(model_cfg, seed=train_cfg.seed)
    print(f"model: {net.param_count()} trainable parameters; "
          f"{len(train_pairs)} train / {len(val_pairs)} val pairs")

    def on_epoch(epoch, lr, mean_loss, score):
        print(f"epoch {epoch}: lr={lr:.6g} loss={mean_loss:.6g} "
              f"val_si_snr={score:.3f} dB")

    result = train(net, train_pairs, val_pairs, train_cfg, out_dir=args.out,
                   on_epoch=on_epoch)
    print(f"best: epoch {result.best_epoch}, val_si_snr={result.best_score:.3f} dB")
    print(f"best checkpoint: {result.best_path}")
    return 0


def cmd_enhance(args):
    net = load_model(args.model)
    buf = read_wav(args.infile)
    if args.streaming:
        out = stream_enhance(net, buf.samples)
    else:
        out = net.forward(buf.samples, mode="eval").data
    write_wav(args.outfile, AudioBuffer(out.astype(np.float32), role="enhanced"))
    print(f"wrote {args.outfile} ({out.shape[0]} samples)")
    return 0


def cmd_stream(args):
    net = load_model(args.model)
    engine = StreamEngine(net, max_context=args.max_context)
    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    leftover = b""
    while True:
        block = stdin.read(4096)
        if not block:
            break
        block = leftover + block
        usable = len(block) - (len(block) % 4)
        leftover = block[usable:]
        if usable:
            samples = np.frombuffer(block[:usable], dtype="<f4")
            out = engine.push(samples)
            if out.size:
                stdout.write(out.astype("<f4").tobytes())
                stdout.flush()
    if leftover:
        print("warning: dropped trailing partial sample "
              f"({len(leftover)} bytes)", file=sys.stderr)
    out = engine.flush()
    if out.size:
        stdout.write(out.astype("<f4").tobytes())
    stdout.flush()
    return 0


def cmd_bench(args):
    def one_report(label):
        report = run_bench(net, args.seconds, warmup_chunks=args.warmup,
                           seed=args.seed, max_context=args.max_context)
        if label:
            print(f"backend={label}")
        print(report.human_text())
        for line in report.machine_lines():
            print(line)
        return report

    net = load_model(args.model) if args.model else EnhancementNetwork(
        _load_config_file(args.config)[0], seed=0)
    if not net.config.causal:
        print("error: bench requires a causal model", file=sys.stderr)
        return 1
    if args.compare_backends:
        original = backend.backend_name()
        try:
            for name in backend.available_backends():
                backend.use(name)
                one_report(name)
        finally:
            backend.use(original)
    else:
        one_report(None)
    return 0


def cmd_params(args):
    model_cfg, _ = _load_config_file(args.config)
    net = EnhancementNetwork(model_cfg, seed=0)
    print(net.param_count())
    return 0


def cmd_eval(args):
    net = load_model(args.model)
    pairs = load_pairs(args.manifest)
    cells = {}
    for pair in pairs:
        enhanced = net.forward(pair.mixture.samples, mode="eval").data
        gain = si_snr_improvement(enhanced, pair.mixture.samples, pair.clean.samples)
        cells.setdefault(pair.snr_db, []).append(gain)
    print(f"{'snr_db':>8} {'pairs':>6} {'si_snri_db':>11}")
    all_gains = []
    for snr in sorted(cells):
        gains = cells[snr]
        all_gains.extend(gains)
        print(f"{snr:>8g} {len(gains):>6d} {np.mean(gains):>11.3f}")
    print(f"{'average':>8} {len(all_gains):>6d} {np.mean(all_gains):>11.3f}")
    print(f"mean_si_snri_db={np.mean(all_gains):.4f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="dpsarnn",
        description="Real-time dual-path speech enhancement toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate a synthetic corpus")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--duration", type=float, default=4.0, help="seconds per pair")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(fn=cmd_synth_data)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--config", required=True, help="JSON config file")
    sp.add_argument("--data", required=True, help="training dir or manifest")
    sp.add_argument("--val", required=True, help="validation dir or manifest")
    sp.add_argument("--out", required=True, help="checkpoint/log directory")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("enhance", help="enhance a WAV file")
    sp.add_argument("--model", required=True, help="checkpoint path")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", dest="outfile", required=True)
    sp.add_argument("--streaming", action="store_true",
                    help="use the chunk-streaming path (causal models only)")
    sp.set_defaults(fn=cmd_enhance)

    sp = sub.add_parser("stream", help="float32 stdin -> enhanced float32 stdout")
    sp.add_argument("--model", required=True)
    sp.add_argument("--max-context", type=int, default=None,
                    help="cap attention history (chunks)")
    sp.set_defaults(fn=cmd_stream)

    sp = sub.add_parser("bench", help="per-chunk latency benchmark")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", help="checkpoint path")
    group.add_argument("--config", help="JSON config (random weights)")
    sp.add_argument("--seconds", type=float, default=10.0)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-context", type=int, default=None)
    sp.add_argument("--compare-backends", action="store_true",
                    help="run once per available kernel backend")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("params", help="trainable-parameter count for a config")
    sp.add_argument("--config", required=True)
    sp.set_defaults(fn=cmd_params)

    sp = sub.add_parser("eval", help="SI-SNR improvement over a manifest")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(fn=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=1):
            return args.fn(args)
    except (DpsarnnError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
