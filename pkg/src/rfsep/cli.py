"""Command-line entry point: ``rfsep <subcommand>``.

Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, DimensionError, NumericError, ParameterError, UndefinedReferenceError
from .evaluation import (
    emit_spectrogram_image,
    evaluate,
    plot_history,
    separate_long,
    swap_flags,
    window_permutations,
)
from .model import ModelConfig, RFSeparator, TINY_CONFIG
from .signal_io import SignalLibrary, read_signal, write_signal
from .training import (
    MixingConfig,
    TrainConfig,
    build_mixture,
    build_test_set,
    fit_fixed,
    mean_loss,
    read_history_csv,
    train,
    write_history_csv,
)
from .waveforms import Intrapulse, generate_library

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("rfsep")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(path) -> Path:
    """Validate (without creating) a directory we are about to write into."""
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise UsageError(f"output path exists and is not a directory: {p}")
    parent = p
    while not parent.exists():
        parent = parent.parent
    if not parent.is_dir():
        raise UsageError(f"cannot create directory under {parent}")
    return p


def _out_file(path) -> Path:
    p = Path(path)
    if p.is_dir():
        raise UsageError(f"output path is a directory: {p}")
    _out_dir(p.parent)
    return p


def _in_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def _in_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"input directory not found: {p}")
    return p


def load_run_config(path):
    """``(ModelConfig, TrainConfig)`` from an optional JSON file with ``model``/``train`` keys."""
    if path is None:
        return ModelConfig(), TrainConfig()
    with open(path) as fh:
        data = json.load(fh)
    return ModelConfig.from_dict(data.get("model", {})), TrainConfig.from_dict(data.get("train", {}))


def cmd_synth(args):
    out = _out_dir(args.out_dir)
    kinds = [Intrapulse(k) for k in args.kind]
    seeds = np.random.SeedSequence(args.seed).spawn(len(kinds))
    for kind, seq in zip(kinds, seeds):
        generate_library(kind, args.count, args.length, np.random.default_rng(seq), out_dir=out, workers=args.workers)
        print(f"{kind.value}: {args.count} signals -> {out}")
    return EXIT_OK


def cmd_mix_preview(args):
    lib_dir = _in_dir(args.lib)
    out = _out_dir(args.out_dir)
    lib = SignalLibrary(lib_dir)
    rng = np.random.default_rng(args.seed)
    mixing = MixingConfig(chunk_len=args.chunk_len)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        s = build_mixture(lib, rng, mixing)
        write_signal(out / f"mix_{i:03d}.f32", s.mixture)
        for c in range(2):
            write_signal(out / f"mix_{i:03d}_truth{c + 1}.f32", s.truths[c])
        emit_spectrogram_image(s.mixture, out / f"mix_{i:03d}.png")
        print(json.dumps({"index": i, "pair": s.indices, "scale_dbfs": s.scale_dbfs, "snr_db": s.snr_db, "norm_factor": s.norm_factor}))
    return EXIT_OK


def cmd_train(args):
    train_dir = _in_dir(args.train_lib)
    test_dir = _in_dir(args.test_lib) if args.test_lib else None
    if args.config:
        _in_file(args.config)
    ckpt = _out_file(args.out_checkpoint)
    log_path = _out_file(args.log) if args.log else None
    model_cfg, train_cfg = load_run_config(args.config)
    if args.seed is not None:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": args.seed})
    torch.manual_seed(train_cfg.seed)
    model = RFSeparator(model_cfg)
    lib = SignalLibrary(train_dir)
    test_lib = SignalLibrary(test_dir) if test_dir else None
    model, history = train(model, lib, train_cfg, test_lib, progress=lambda r: print(json.dumps(r)))
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt, extra={"train": train_cfg.to_dict(), "epochs_done": len(history)})
    if log_path:
        write_history_csv(history, log_path)
    return EXIT_OK


def cmd_eval(args):
    _in_file(args.checkpoint)
    test_dir = _in_dir(args.test_lib)
    report_path = _out_file(args.report)
    plots = _out_dir(args.plots) if args.plots else None
    model = load_checkpoint(args.checkpoint)
    lib = SignalLibrary(test_dir)
    w = model.config.signal_length
    samples = build_test_set(lib, args.seed, MixingConfig(chunk_len=w * args.stitch))
    if args.limit:
        samples = samples[: args.limit]
    report = evaluate(model, samples)
    report.config = {"model": model.config.to_dict(), "seed": args.seed, "stitch": args.stitch, "test_lib": str(test_dir)}
    report.save(report_path)
    if plots:
        plots.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples[: args.n_plots]):
            est = separate_long(model, s.mixture, normalize=False)
            emit_spectrogram_image(s.mixture, plots / f"sample{i:03d}_mixture.png")
            for c in range(2):
                emit_spectrogram_image(est[c], plots / f"sample{i:03d}_est{c + 1}.png")
                emit_spectrogram_image(s.truths[c], plots / f"sample{i:03d}_truth{c + 1}.png")
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_sample_sd_sdr"}))
    return EXIT_OK


def cmd_separate(args):
    _in_file(args.checkpoint)
    _in_file(args.input)
    truth_paths = [_in_file(p) for p in args.truths] if args.truths else None
    out = _out_dir(args.out_dir)
    model = load_checkpoint(args.checkpoint)
    x = read_signal(args.input)
    est = separate_long(model, x)
    out.mkdir(parents=True, exist_ok=True)
    for c in range(2):
        write_signal(out / f"channel{c + 1}.f32", est[c])
    if truth_paths:
        truths = np.stack([read_signal(p) for p in truth_paths])
        if truths.shape != est.shape:
            raise DimensionError(f"truth shape {truths.shape} does not match output {est.shape}")
        perms = window_permutations(est, truths, model.config.signal_length)
        for b, flagged in enumerate(swap_flags(perms)):
            if flagged:
                log.warning("channel swap between windows %d and %d", b, b + 1)
    if args.plots:
        emit_spectrogram_image(x, out / "input.png")
        for c in range(2):
            emit_spectrogram_image(est[c], out / f"channel{c + 1}.png")
    print(f"wrote {out / 'channel1.f32'} and {out / 'channel2.f32'} ({len(x)} samples)")
    return EXIT_OK


def cmd_plot(args):
    if not args.signal and not args.history:
        raise UsageError("give --signal or --history")
    src = _in_file(args.signal or args.history)
    out = _out_file(args.out)
    if args.signal:
        emit_spectrogram_image(read_signal(src), out, zoom=args.zoom)
    else:
        plot_history(read_history_csv(src), out)
    print(f"wrote {out}")
    return EXIT_OK


SMOKE_STEPS = 50
SMOKE_LR = 1e-3


def run_smoke(seed: int, out_dir: Path) -> dict:
    """Tiny synth -> mix -> train -> eval pass; raises ``RuntimeError`` naming the failed stage."""
    stage = "synth"
    try:
        lib_dir = out_dir / "lib"
        for i, kind in enumerate((Intrapulse.FRANK, Intrapulse.COSTAS)):
            generate_library(kind, 2, 20000, rng=seed * 10 + i, out_dir=lib_dir)
        stage = "mix"
        lib = SignalLibrary(lib_dir)
        rng = np.random.default_rng(seed)
        mixing = MixingConfig(chunk_len=TINY_CONFIG.signal_length)
        samples = [build_mixture(lib, rng, mixing, pair=(0, 2)), build_mixture(lib, rng, mixing, pair=(1, 3))]
        stage = "train"
        torch.manual_seed(seed)
        model = RFSeparator(TINY_CONFIG)
        initial = mean_loss(model, samples)
        fit_fixed(model, samples, SMOKE_STEPS, lr=SMOKE_LR, seed=seed)
        final = mean_loss(model, samples)
        if not final < initial:
            raise NumericError(f"loss did not decrease ({initial:.4f} -> {final:.4f})")
        stage = "eval"
        report = evaluate(model, samples)
        save_checkpoint(model, out_dir / "smoke.ckpt")
    except Exception as exc:
        raise RuntimeError(f"smoke stage '{stage}' failed: {exc}") from exc
    return {"initial_loss": initial, "final_loss": final, "mean_sd_sdr": report.mean_sd_sdr, "swap_rate": report.swap_rate}


def cmd_smoke(args):
    if args.out_dir:
        out = _out_dir(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = run_smoke(args.seed, out)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            summary = run_smoke(args.seed, Path(tmp))
    print(json.dumps(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rfsep", description="Single-channel RF signal separation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a waveform library")
    s.add_argument("--kind", action="append", required=True, choices=[k.value for k in Intrapulse])
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--length", type=int, default=10**6)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("mix-preview", help="write a few training mixtures with spectrograms")
    s.add_argument("--lib", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--chunk-len", type=int, default=65280)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_mix_preview)

    s = sub.add_parser("train", help="train a separator")
    s.add_argument("--train-lib", required=True)
    s.add_argument("--test-lib")
    s.add_argument("--config", help="JSON with 'model' and 'train' sections")
    s.add_argument("--out-checkpoint", required=True)
    s.add_argument("--log", help="history CSV")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a test library")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--test-lib", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--plots")
    s.add_argument("--n-plots", type=int, default=3)
    s.add_argument("--stitch", type=int, default=3, help="consecutive windows per test sample")
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--seed", type=int, default=12345)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("separate", help="separate a raw float32 signal file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--truths", nargs=2, metavar="TRUTH")
    s.add_argument("--plots", action="store_true")
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("plot", help="spectrogram image of a signal or learning curve of a history CSV")
    s.add_argument("--signal")
    s.add_argument("--history")
    s.add_argument("--out", required=True)
    s.add_argument("--zoom", type=int, default=1)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("smoke", help="tiny end-to-end pipeline run")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_smoke)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rfsep {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"rfsep {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, ParameterError, DimensionError, UndefinedReferenceError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"rfsep {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:
        cause = exc.__cause__
        print(f"rfsep {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(cause, NumericError) else EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
