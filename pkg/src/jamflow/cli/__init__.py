"""Command-line interface: train / sample / eval.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric
failure (non-finite loss or sampler state).
"""

import argparse
import os
import sys

import numpy as np

from ..data import smoothed_energy
from ..dit import JamModel
from ..flow import SamplingConditions, sample_pair
from ..numerics import NumericError, ShapeError
from .config import (
    ConfigError,
    apply_overrides,
    load_config,
    parse_config,
    serialize_config,
)
from .evaluate import eval_model, write_report
from .formats import FormatError, read_checkpoint, read_sequences, write_sequences
from .train import load_params_into, run_training


def _load_model(ckpt_path, config_path=None, overrides=()):
    config_text, tensors, _ = read_checkpoint(ckpt_path)
    rc = load_config(config_path) if config_path else parse_config(config_text)
    apply_overrides(rc, overrides or ())
    rc.validate()
    model = JamModel(rc.model, seed=rc.train.seed)
    load_params_into(model, tensors, list(model.parameters("2_joint")), ckpt_path)
    return model, rc


def _cmd_train(args):
    rc = load_config(args.config)
    apply_overrides(rc, args.set or ())
    final = run_training(rc, resume=args.resume, from_scratch=args.from_scratch,
                         quiet=not args.verbose)
    print(final)
    return 0


def _parse_tokens(raw, vocab):
    try:
        toks = [int(t) for t in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"--text must be integer token ids, got '{raw}'") from None
    bad = [t for t in toks if not 0 < t < vocab]
    if bad:
        raise ConfigError(f"--text ids must lie in [1, {vocab}), got {bad}")
    return np.asarray(toks, dtype=np.int64)


def _load_stream(path, name):
    streams = read_sequences(path)
    if name not in streams:
        raise ConfigError(f"{path}: no stream named '{name}' "
                          f"(has: {', '.join(sorted(streams))})")
    return streams[name]


def _known_prefix(length, n_known, what):
    if n_known is None:
        return None  # fully known
    if not 0 < n_known <= length:
        raise ConfigError(f"{what} must lie in [1, {length}], got {n_known}")
    known = np.zeros(length, dtype=bool)
    known[:n_known] = True
    return known


def _cmd_sample(args):
    model, rc = _load_model(args.checkpoint, args.config, args.set)
    cfg = model.cfg
    scfg = rc.sampler
    if args.nfe is not None:
        scfg.nfe = args.nfe
    if args.cfg_scale is not None:
        scfg.cfg_scale = args.cfg_scale
    if args.seed is not None:
        scfg.seed = args.seed

    motion = audio = rest = None
    if args.ref_motion:
        motion = _load_stream(args.ref_motion, "motion")
    if args.rest_motion:
        rest = _load_stream(args.rest_motion, "rest")
    if args.ref_audio:
        audio = _load_stream(args.ref_audio, "audio")

    if motion is not None:
        lm = motion.shape[0]
    elif rest is not None:
        lm = rest.shape[0]
    elif args.motion_len is not None:
        lm = args.motion_len
    elif audio is not None:
        lm = None  # derived below
    else:
        lm = rc.data.lm_min
    if lm is None:
        la = audio.shape[0]
        lm_f = la / cfg.frame_ratio
        lm = int(round(lm_f))
        if abs(lm_f - lm) > 1e-9:
            raise ConfigError(
                f"--ref-audio has {la} frames, not a multiple of frame_ratio "
                f"{cfg.frame_ratio}"
            )
    la = cfg.audio_len(lm)
    for name, arr, want in (("--ref-audio", audio, la), ("--ref-motion", motion, lm),
                            ("--rest-motion", rest, lm)):
        if arr is not None and arr.shape[0] != want:
            raise ConfigError(
                f"{name} has {arr.shape[0]} frames; config ratio requires {want}"
            )

    conds = SamplingConditions(
        audio=audio,
        audio_known=None if audio is None else _known_prefix(la, args.audio_known,
                                                             "--audio-known"),
        motion=motion,
        motion_known=None if motion is None else _known_prefix(lm, args.motion_known,
                                                               "--motion-known"),
        text_tokens=None if args.text is None else _parse_tokens(args.text, cfg.text_vocab),
        rest=rest,
    )
    gen_audio, gen_motion = sample_pair(model, conds, lm, scfg)

    os.makedirs(args.out, exist_ok=True)
    seq_path = os.path.join(args.out, "generated.jseq")
    write_sequences(seq_path, {"audio": gen_audio, "motion": gen_motion})
    csv_path = os.path.join(args.out, "generated.csv")
    energy, _ = smoothed_energy(gen_audio, lm)
    with open(csv_path, "w", encoding="utf-8") as f:
        cols = ",".join(f"motion_{c}" for c in range(gen_motion.shape[1]))
        f.write(f"frame,audio_energy,{cols}\n")
        for j in range(lm):
            vals = ",".join(f"{v:.6f}" for v in gen_motion[j])
            f.write(f"{j},{energy[j]:.6f},{vals}\n")
    print(seq_path)
    return 0


def _cmd_eval(args):
    model, rc = _load_model(args.checkpoint, args.config, args.set)
    if args.n_samples < 1:
        raise ConfigError(f"--n-samples must be >= 1, got {args.n_samples}")
    rows = eval_model(model, rc, args.corpus_seed, args.n_samples)
    write_report(rows, args.report)
    print(args.report)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="jamflow",
                                description="Joint audio/motion flow matching.")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="config override, repeatable")

    t = sub.add_parser("train", parents=[common], help="run a training stage")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--from-scratch", action="store_true",
                   help="stage 2 without stage-1 checkpoints")
    t.add_argument("--verbose", action="store_true")

    s = sub.add_parser("sample", parents=[common], help="generate sequences")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", help="config file overriding the checkpoint's")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--text", help="token ids, e.g. '3,1,4'")
    s.add_argument("--ref-audio", help="JSEQ file with an 'audio' stream")
    s.add_argument("--audio-known", type=int, metavar="N",
                   help="treat only the first N audio frames as known")
    s.add_argument("--ref-motion", help="JSEQ file with a 'motion' stream")
    s.add_argument("--motion-known", type=int, metavar="N")
    s.add_argument("--rest-motion", help="JSEQ file with a 'rest' stream")
    s.add_argument("--motion-len", type=int)
    s.add_argument("--nfe", type=int)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--seed", type=int)

    e = sub.add_parser("eval", parents=[common], help="held-out regime metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--report", required=True, help="output CSV path")
    e.add_argument("--corpus-seed", type=int, default=999)
    e.add_argument("--n-samples", type=int, default=8)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "sample":
            return _cmd_sample(args)
        return _cmd_eval(args)
    except NumericError as e:
        print(f"jamflow: numeric failure: {e}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, ShapeError, ValueError, OSError) as e:
        print(f"jamflow: error: {e}", file=sys.stderr)
        return 2


__all__ = ["main", "build_parser", "serialize_config"]
