"""Training loop: staged, deterministic, resumable.

Every random draw is keyed by (seed, purpose, step [, slot]), never by
generator state carried across steps, so resuming from a checkpoint at
step k replays steps k+1..n with the exact arrays an uninterrupted run
would have used; checkpoints after resume are bitwise identical.
"""

import math
import os
import time

import numpy as np

from .. import numerics as nm
from .. import rng
from ..data import build_corpus, conditioned_item
from ..dit import STAGE1_ONLY, JamModel
from ..flow import joint_loss
from ..numerics import NumericError, adam_step, global_grad_norm, zero_grads
from .config import ConfigError, serialize_config
from .formats import read_checkpoint, write_checkpoint

METRICS_HEADER = "step,stage,loss,loss_audio,loss_motion,grad_norm,lr,wall_ms"


def load_params_into(model, tensors, names, source, allow_extra_prefixes=()):
    """Copy checkpoint arrays into the named model parameters.

    `names` is the exact set required from this checkpoint; extras are
    errors unless stage-1-only or under an allowed prefix.
    """
    params = {}
    params.update(model.audio.named())
    params.update(model.motion.named())
    missing = [n for n in names if n not in tensors]
    if missing:
        raise ConfigError(f"{source}: missing parameters: {', '.join(sorted(missing)[:5])}"
                          + (" ..." if len(missing) > 5 else ""))
    extra = [n for n in tensors if n not in names and n not in STAGE1_ONLY
             and not any(n.startswith(p) for p in allow_extra_prefixes)]
    if extra:
        raise ConfigError(f"{source}: unexpected parameters: {', '.join(sorted(extra)[:5])}"
                          + (" ..." if len(extra) > 5 else ""))
    for n in names:
        arr = tensors[n]
        if arr.shape != params[n].data.shape:
            raise ConfigError(
                f"{source}: parameter '{n}' has shape {arr.shape}, "
                f"model expects {params[n].data.shape}"
            )
        params[n].data = arr.astype(params[n].data.dtype)


class _Lock:
    """Exclusive ownership of a checkpoint directory."""

    def __init__(self, ckpt_dir):
        self.path = os.path.join(ckpt_dir, ".lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"checkpoint dir is locked by another training process "
                f"({self.path}); remove the lock if that process is gone"
            ) from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)


def _bucket_indices(corpus):
    buckets = {}
    for i, s in enumerate(corpus):
        buckets.setdefault(s.motion.shape[0], []).append(i)
    return [buckets[k] for k in sorted(buckets)]


def _draw_batch(corpus, buckets, seed, step, batch_size):
    gen = rng.stream(seed, "batch", step)
    sizes = np.array([len(b) for b in buckets])
    r = int(gen.integers(0, sizes.sum()))
    which = int(np.searchsorted(np.cumsum(sizes), r, side="right"))
    idx = gen.integers(0, len(buckets[which]), size=batch_size)
    return [corpus[buckets[which][int(i)]] for i in idx]


def _checkpoint_path(ckpt_dir, step):
    return os.path.join(ckpt_dir, f"step_{step:06d}.jamf")


def run_training(rc, resume=None, from_scratch=False, quiet=True):
    """Run rc.train.steps optimizer steps; returns the final checkpoint path."""
    rc.validate()
    cfg = rc.model
    train = rc.train
    stage = train.stage
    os.makedirs(rc.paths.ckpt_dir, exist_ok=True)
    metrics_dir = os.path.dirname(rc.paths.metrics)
    if metrics_dir:
        os.makedirs(metrics_dir, exist_ok=True)

    with _Lock(rc.paths.ckpt_dir):
        model = JamModel(cfg, seed=train.seed)
        params = model.parameters(stage)
        opt = nm.OptimizerState(lr=train.lr)
        start_step = 0

        if resume is not None:
            _, tensors, optimizer = read_checkpoint(resume)
            load_params_into(model, tensors, list(params), resume)
            if optimizer is None:
                raise ConfigError(f"{resume}: checkpoint has no optimizer state to resume")
            start_step, opt.m, opt.v = optimizer
            opt.step = start_step
            extra_m = set(opt.m) - set(params)
            if extra_m or set(opt.m) != set(opt.v):
                raise ConfigError(f"{resume}: optimizer moments do not match stage parameters")
        elif stage == "2_joint" and not from_scratch:
            if not train.init_audio or not train.init_motion:
                raise ConfigError(
                    "stage 2_joint needs train.init_audio and train.init_motion "
                    "checkpoints (or --from-scratch)"
                )
            _, ta, _ = read_checkpoint(train.init_audio)
            audio_names = [n for n in params if n.startswith("audio.")]
            load_params_into(model, ta, audio_names, train.init_audio)
            _, tm, _ = read_checkpoint(train.init_motion)
            motion_names = [n for n in params if n.startswith("motion.")]
            load_params_into(model, tm, motion_names, train.init_motion)

        corpus = build_corpus(rc.data.corpus_seed, cfg, rc.data.corpus_size,
                              rc.data.lm_min, rc.data.lm_max)
        buckets = _bucket_indices(corpus)
        spec = rc.dropout_spec()

        mode = "a" if resume is not None and os.path.exists(rc.paths.metrics) else "w"
        counters = {}
        final_path = _checkpoint_path(rc.paths.ckpt_dir, train.steps)
        with open(rc.paths.metrics, mode, encoding="utf-8") as mf:
            if mode == "w":
                mf.write(METRICS_HEADER + "\n")
            for step in range(start_step + 1, train.steps + 1):
                t0 = time.perf_counter()
                batch = _draw_batch(corpus, buckets, train.seed, step, train.batch_size)
                items = [
                    conditioned_item(
                        s, spec, rng.stream(train.seed, "item", step, slot),
                        rc.data.mask_min_frac, rc.data.mask_max_frac,
                        rc.data.full_mask_prob,
                    )
                    for slot, s in enumerate(batch)
                ]
                loss, l_audio, l_motion = joint_loss(
                    items, model, rng.stream(train.seed, "flow", step),
                    counters=counters, stage=stage,
                )
                if not math.isfinite(loss.item()):
                    raise NumericError(f"training: non-finite loss at step {step}")
                zero_grads(params)
                loss.backward()
                gnorm = global_grad_norm(params)
                adam_step(params, None, opt)
                wall_ms = int(round(1000.0 * (time.perf_counter() - t0)))
                mf.write(
                    f"{step},{stage},{loss.item():.8f},{l_audio.item():.8f},"
                    f"{l_motion.item():.8f},{gnorm:.8f},{train.lr:g},{wall_ms}\n"
                )
                if step % train.ckpt_every == 0 or step == train.steps:
                    tensors = {k: p.data for k, p in params.items()}
                    write_checkpoint(
                        _checkpoint_path(rc.paths.ckpt_dir, step),
                        serialize_config(rc), tensors, (opt.step, opt.m, opt.v),
                    )
                if not quiet and (step % 50 == 0 or step == 1):
                    print(f"step {step}: loss {loss.item():.5f}", flush=True)
    return final_path
