"""Command-line entry point: synth, train, enhance, analyze, abtest."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .analyze import analyze_dirs, binomial_test_two_tailed, emit_report
from .data import DEGRADATIONS, AudioIOError, read_wav, synthesize_corpus, write_wav
from .diffarray import ContractError
from .model import CheckpointError, load_generator
from .train import TrainConfig, TrainingError, enhance_audio, load_config_file, run_training

log = logging.getLogger("soundgood")

SOURCES = ("bass", "drums", "vocals")
RUNTIME_ERRORS = (ContractError, AudioIOError, CheckpointError, TrainingError, OSError, ValueError,
                  FloatingPointError)

# train flags that map one-to-one onto TrainConfig fields
TRAIN_FLAGS = ("manifest", "source", "separators", "steps", "seed", "batch_size", "calibration_window",
               "checkpoint_every", "out", "loss_csv", "lr", "swap_p", "log_every")


class DefaultsFormatter(argparse.HelpFormatter):
    """Append ``(default: X)`` unless the help already states it or there is none."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or action.default in (None, argparse.SUPPRESS) or not action.option_strings:
            return text
        return f"{text} (default: %(default)s)"


def _train_default(name):
    return getattr(TrainConfig(), name)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soundgood", description="Post-process separated sources with a GAN enhancer.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    fmt = DefaultsFormatter

    s = sub.add_parser("synth", help="write a synthetic degraded corpus", formatter_class=fmt)
    s.add_argument("--out", required=True, help="corpus root directory")
    s.add_argument("--num-clips", type=int, required=True)
    s.add_argument("--degradation", choices=DEGRADATIONS, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--source", choices=SOURCES, default=None,
                   help="source class to synthesize (default: drums for smear, bass otherwise)")
    s.add_argument("--clip-len", type=int, default=16000, help="samples per clip at 16 kHz")

    t = sub.add_parser("train", help="train the enhancer", formatter_class=fmt,
                       description="Settings resolve as built-in defaults < --config file < flags.")
    t.add_argument("--config", default=None, help="JSON file with training settings")
    t.add_argument("--manifest", default=None, help="corpus manifest.json")
    t.add_argument("--source", choices=SOURCES, default=None, help="source class to train on (default: all)")
    t.add_argument("--separators", nargs="+", default=None, help="separator tags to use (default: all)")
    t.add_argument("--resume", default=None, help="training checkpoint to continue from")
    for name, typ, help_ in (("steps", int, "training steps"), ("seed", int, "random seed"),
                             ("batch_size", int, "clips per batch"),
                             ("calibration_window", int, "steps before the loss weights freeze"),
                             ("checkpoint_every", int, "steps between checkpoints"),
                             ("out", str, "checkpoint path"), ("loss_csv", str, "loss log (default: OUT.losses.csv)"),
                             ("lr", float, "Adam learning rate"), ("swap_p", float, "input/target swap probability"),
                             ("log_every", int, "steps between progress lines")):
        default = _train_default(name)
        t.add_argument("--" + name.replace("_", "-"), type=typ, default=None,
                       help=help_ if default is None else f"{help_} (default: {default})")

    e = sub.add_parser("enhance", help="run a trained generator on one file", formatter_class=fmt)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="inp", required=True, help="input WAV")
    e.add_argument("--out", required=True, help="output WAV (float32, same rate and length)")

    a = sub.add_parser("analyze", help="objective metrics against references")
    asub = a.add_subparsers(dest="analysis", required=True, metavar="ANALYSIS")
    for kind, help_ in (("rolloff", "spectral rolloff error in cents"), ("onsets", "onset envelope F1")):
        k = asub.add_parser(kind, help=help_, formatter_class=fmt)
        k.add_argument("--est", required=True, help="estimate tree <track>/<source>.wav")
        k.add_argument("--ref", required=True, help="reference tree <track>/<source>.wav")
        k.add_argument("--report", required=True, help="output JSON")
        k.add_argument("--percent", type=float, default=0.98, help="rolloff energy fraction")
        k.add_argument("--gate-db", type=float, default=-40.0, help="reference frame RMS gate in dBFS")
        k.add_argument("--threshold", type=float, default=0.75, help="onset peak threshold")
        k.add_argument("--hop", type=int, default=512, help="frame hop in samples")
        if kind == "rolloff":
            k.add_argument("--csv", default=None, help="optional per-frame CSV")

    b = sub.add_parser("abtest", help="two-tailed binomial test for a preference count", formatter_class=fmt)
    b.add_argument("--successes", type=int, required=True)
    b.add_argument("--trials", type=int, required=True)
    b.add_argument("--p0", type=float, default=0.5, help="null success probability")
    return p


def resolve_train_config(args) -> TrainConfig:
    settings = load_config_file(args.config) if args.config else {}
    for name in TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            settings[name] = value
    return TrainConfig.from_dict(settings)


def cmd_synth(args) -> int:
    manifest = synthesize_corpus(args.out, args.num_clips, args.degradation, args.seed, args.source, args.clip_len)
    print(f"wrote {args.num_clips} {args.degradation} clips to {args.out} "
          f"({len(manifest['clips'])} clips in manifest)")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    res = run_training(cfg, resume=args.resume)
    last = res.history[-1] if res.history else {}
    print(f"checkpoint {res.checkpoint}; losses {res.loss_csv}; final L_mel {last.get('L_mel', float('nan')):.4f}")
    return 0


def cmd_enhance(args) -> int:
    G, header = load_generator(args.ckpt)
    audio = read_wav(args.inp)
    log.info("resolved config: %s", json.dumps({"ckpt": args.ckpt, "in": args.inp, "out": args.out,
                                                "generator": header.get("generator")}, sort_keys=True))
    out = enhance_audio(G, audio)
    write_wav(args.out, out)
    print(f"wrote {args.out} ({len(out)} samples at {out.sample_rate} Hz)")
    return 0


def cmd_analyze(args) -> int:
    params = {k: getattr(args, k) for k in ("est", "ref", "report", "percent", "gate_db", "threshold", "hop")}
    log.info("resolved config: %s", json.dumps({"analysis": args.analysis, **params}, sort_keys=True))
    rep = analyze_dirs(args.analysis, args.est, args.ref, args.percent, args.gate_db, args.threshold, args.hop)
    emit_report(rep, args.report, getattr(args, "csv", None))
    for source, r in sorted(rep.classes.items()):
        if args.analysis == "rolloff":
            print(f"{source}: mean {r.mean_signed:+.1f} cents, mean |err| {r.mean_abs:.1f} cents, "
                  f"{r.analyzed} frames ({r.gated} gated, {r.skipped} skipped)")
        else:
            c = r.counts
            print(f"{source}: F1 {c.f1:.4f} (TP {c.tp}, FP {c.fp}, FN {c.fn})")
    for failure in rep.failures:
        log.error("failed to load %s", failure)
    return 1 if rep.failures else 0


def cmd_abtest(args) -> int:
    print(binomial_test_two_tailed(args.successes, args.trials, args.p0))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "enhance": cmd_enhance, "analyze": cmd_analyze,
            "abtest": cmd_abtest}


def run_cli(argv=None) -> int:
    """Parse ``argv`` and run; returns 0 on success, 1 on runtime failure, 2 on usage error."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except RUNTIME_ERRORS as exc:
        log.error("%s", exc)
        return 1


def main() -> None:
    sys.exit(run_cli())
