"""Command-line entry point: ``anchorvoice <verb> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Configuration is
layered as config file < ANCHOR_SEED (seed only) < explicit flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import audio, gradsuite
from .corpus import make_synthetic_corpus, read_manifest, split_entries
from .curriculum import make_schedule, stage_end_steps
from .evalkit import compare_modes, evaluate, write_report
from .trainer import ConfigError, config_from_pairs, load_model, parse_config_text, run_training

log = logging.getLogger("anchorvoice")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        values = [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--steps", type=int, dest="total_steps")
    p.add_argument("--stages", type=int, dest="stage_count")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--mode", help="progressive | random | fixed:k")
    p.add_argument("--student", dest="student_enabled", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--log-every", type=int, dest="log_every")


def _resolve_config(args):
    if args.config is not None and not args.config.is_file():
        raise ConfigError(f"config not found: {args.config}")
    pairs = parse_config_text(args.config.read_text()) if args.config else {}
    env_seed = os.environ.get("ANCHOR_SEED")
    if env_seed is not None:
        pairs["seed"] = env_seed
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    for key in ("total_steps", "stage_count", "seed", "batch_size", "mode", "student_enabled", "log_every"):
        value = getattr(args, key, None)
        if value is not None:
            pairs[key] = str(value)
    return config_from_pairs(pairs)


# ---------------------------------------------------------------- verbs

def cmd_gen_data(args):
    path = make_synthetic_corpus(args.out, args.speakers, args.utts, args.seed)
    print(path)
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve_config(args)
    entries = read_manifest(args.manifest)

    def progress(model, line):
        log.info("step %d  mel_mae %.4f  anchor_mae %.4f  stage %d  ratio %g", line["step"], line["mel_mae"],
                 line["anchor_mae"], line["stage"], line["ratio"])

    res = run_training(args.manifest, cfg, args.out, resume=args.resume, entries=entries, callback=progress)
    last = res.metrics[-1] if res.metrics else {}
    print(json.dumps({"out": str(args.out), "final": str(res.checkpoints[-1]), **last}))
    return EXIT_OK


def cmd_synth(args):
    if len(args.tokens) != len(args.durations):
        raise UsageError("--tokens and --durations must have the same length")
    if sum(args.durations) < 1:
        raise UsageError("--durations must sum to at least one frame")
    model = load_model(args.checkpoint)
    ref = audio.compute_mel(audio.load_wav(args.ref_audio))
    w = model.style(ref, "student").data
    mel = model.synth(np.array(args.tokens), np.array(args.durations), w).data
    audio.write_mels(args.out, mel)
    print(json.dumps({"out": str(args.out), "frames": int(mel.shape[0]), "ref_frames": int(ref.shape[0])}))
    return EXIT_OK


def cmd_eval(args):
    model = load_model(args.checkpoint)
    entries = read_manifest(args.manifest)
    train, heldout = split_entries(entries, args.holdout)
    target = heldout if args.split == "heldout" else train
    rep = evaluate(model, target, group=args.split)
    write_report(rep, args.json, args.csv)
    print(json.dumps(rep.aggregates))
    return EXIT_OK


def cmd_compare_modes(args):
    base = _resolve_config(args)
    prog = base.replace(mode="progressive")
    rand = base.replace(mode="random")
    _, summary = compare_modes(args.manifest, prog, rand, args.out, entries=read_manifest(args.manifest))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_crop_preview(args):
    try:
        sched = make_schedule(args.steps, args.stages)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    print("step,stage,ratio,kept_frames")
    start = 0
    for k, end in enumerate(stage_end_steps(sched)):
        ratio = sched.ratios[k]
        kept = max(1, int(np.floor(ratio * args.frames)))
        for step in sorted({start, end - 1}):
            print(f"{step},{k},{ratio:.6g},{kept}")
        start = end
    return EXIT_OK


def cmd_grad_check(args):
    worst, elapsed = gradsuite.run_suite(seeds=args.seeds)
    ok = True
    for name, err in worst.items():
        passed = err < gradsuite.TOLERANCE
        ok &= passed
        print(f"{name:18s} {err:.3e} {'ok' if passed else 'FAIL'}")
    print(f"{len(worst)} ops, {args.seeds} seeds, {elapsed:.1f}s: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="anchorvoice", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("gen-data", help="write the synthetic multi-speaker corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--utts", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the teacher/student training loop")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize a mel from tokens, conditioned on a reference clip")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--tokens", type=_int_list, required=True)
    p.add_argument("--durations", type=_int_list, required=True)
    p.add_argument("--ref-audio", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="zero-shot evaluation of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--holdout", type=int, default=2)
    p.add_argument("--split", choices=("heldout", "train"), default="heldout")
    p.add_argument("--json", type=Path)
    p.add_argument("--csv", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-modes", help="train progressive and random curricula and compare them")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_compare_modes)

    p = sub.add_parser("crop-preview", help="CSV of stage, ratio and kept frames at stage edges")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--stages", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.set_defaults(func=cmd_crop_preview)

    p = sub.add_parser("grad-check", help="verify every gradient against central differences")
    p.add_argument("--seeds", type=int, default=gradsuite.SEEDS)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"anchorvoice {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"anchorvoice {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
