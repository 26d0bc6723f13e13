"""Conditional flow matching: training losses and the Euler sampler.

Training draws t uniform per item, corrupts both modalities along the
straight path x_t = (1-t) x0 + t x1, and regresses the model's velocity
against x1 - x0 on the masked frames only.  Sampling integrates
dx/dt = v(x, t) from seeded noise with uniform Euler steps, optionally
doubling up each step with an all-conditions-dropped pass for
classifier-free guidance, and re-imposes known frames on the
interpolation path after every step so conditioning frames come out
exact.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import rng
from .numerics import NumericError, ShapeError, Tensor


@dataclass
class SamplerConfig:
    nfe: int = 32
    cfg_scale: float = 2.0
    seed: int = 0
    # Keep cross-stream attention active during the unconditional pass;
    # set False to sever the streams instead.
    joint_uncond: bool = True


@dataclass
class FlowState:
    """Sampler state after a step: both streams plus the time reached."""
    x_audio: np.ndarray
    x_motion: np.ndarray
    t: float


@dataclass
class SamplingConditions:
    """What the sampler knows.  None means that condition is dropped.

    *_known marks frames whose values are supplied (True = known); a
    given sequence with *_known=None is fully known.  Known frames are
    projected back onto the interpolation path each step and therefore
    appear exactly in the output.
    """
    audio: np.ndarray | None = None
    audio_known: np.ndarray | None = None
    motion: np.ndarray | None = None
    motion_known: np.ndarray | None = None
    text_tokens: np.ndarray | None = None
    rest: np.ndarray | None = None


def interpolate(x0, x1, t):
    """Point at time t on the straight path from x0 to x1."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate: shapes differ, {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolate: t must lie in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * x1


def cfm_loss(v_pred, x0, x1, frame_mask):
    """Mean squared velocity error over masked frames.

    v_pred: Tensor (L, C); x0, x1: arrays (L, C); frame_mask: bool (L,)
    with True marking supervised (to-be-generated) frames.  Returns a
    scalar Tensor; exactly zero when no frame is masked.
    """
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    mask = np.asarray(frame_mask, dtype=bool)
    if v_pred.data.shape != x0.shape or x0.shape != x1.shape:
        raise ShapeError(
            f"cfm_loss: shapes differ, v={v_pred.data.shape} x0={x0.shape} x1={x1.shape}"
        )
    if mask.shape != (x0.shape[0],):
        raise ShapeError(f"cfm_loss: mask shape {mask.shape} != ({x0.shape[0]},)")
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0)
    u = (x1 - x0).astype(v_pred.data.dtype)
    diff = v_pred - u
    w = mask.astype(v_pred.data.dtype)[:, None] / (n * x0.shape[1])
    return nm.sum_all(diff * diff * w)


def _masked_mean_weights(masks, channels, dtype):
    """Stacked per-item weights (B, L, 1) so that sum(sq * w) equals the
    mean over items of each item's masked-frame mean squared error."""
    B = len(masks)
    L = masks[0].shape[0]
    w = np.zeros((B, L, 1), dtype=dtype)
    for i, m in enumerate(masks):
        n = int(m.sum())
        if n:
            w[i, :, 0] = m.astype(dtype) / (n * channels * B)
    return w


def _stack(batch, attr):
    return np.stack([np.asarray(getattr(s, attr)) for s in batch])


def joint_loss(batch, model, gen, counters=None, stage="2_joint"):
    """Flow-matching loss on a batch of conditioned samples.

    batch: list of data.ConditionedSample (equal lengths); gen: numpy
    Generator for the step's draws (t, then audio noise, then motion
    noise, in that order).  Returns (L, L_audio, L_motion) scalar
    Tensors with L = L_audio + L_motion.  Items with both modality
    masks empty contribute nothing and bump counters["skipped"].
    """
    B = len(batch)
    if B == 0:
        raise ShapeError("joint_loss: empty batch")
    dt = nm.default_dtype()
    x1_a = _stack(batch, "audio").astype(dt)
    x1_m = _stack(batch, "motion").astype(dt)
    la, ca = x1_a.shape[1], x1_a.shape[2]
    lm, cm = x1_m.shape[1], x1_m.shape[2]
    t = gen.random(B)
    x0_a = gen.standard_normal((B, la, ca)).astype(dt)
    x0_m = gen.standard_normal((B, lm, cm)).astype(dt)
    xt_a = (1.0 - t)[:, None, None] * x0_a + t[:, None, None] * x1_a
    xt_m = (1.0 - t)[:, None, None] * x0_m + t[:, None, None] * x1_m

    masks_a = [np.asarray(s.audio_mask, dtype=bool) for s in batch]
    masks_m = [np.asarray(s.motion_mask, dtype=bool) for s in batch]
    if counters is not None:
        skipped = sum(1 for ma, mm in zip(masks_a, masks_m) if not ma.any() and not mm.any())
        counters["skipped"] = counters.get("skipped", 0) + skipped

    common = dict(
        motion_noisy=xt_m, motion_cond=_stack(batch, "motion_cond").astype(dt),
        motion_ind=_stack(batch, "motion_ind").astype(dt),
        rest=_stack(batch, "rest_cond").astype(dt),
    )
    if stage == "1_motion":
        vm = model.forward_motion_only(
            t=t, audio_feat=_stack(batch, "audio_feat").astype(dt), **common
        )
        va = None
    else:
        audio_kw = dict(
            audio_noisy=xt_a, audio_cond=_stack(batch, "audio_cond").astype(dt),
            audio_ind=_stack(batch, "audio_ind").astype(dt),
            text_ids=_stack(batch, "text_ids"),
            text_keep=np.array([s.text_keep for s in batch]),
        )
        if stage == "1_audio":
            va = model.forward_audio_only(t=t, **audio_kw)
            vm = None
        elif stage == "2_joint":
            va, vm = model.forward_batch(t_audio=t, t_motion=t, **audio_kw, **common)
        else:
            raise ValueError(f"joint_loss: unknown stage '{stage}'")

    def branch_loss(v, x0, x1, masks, channels):
        if v is None:
            return Tensor(0.0)
        u = x1 - x0
        diff = v - u
        w = _masked_mean_weights(masks, channels, dt)
        return nm.sum_all(diff * diff * w)

    l_audio = branch_loss(va, x0_a, x1_a, masks_a, ca)
    l_motion = branch_loss(vm, x0_m, x1_m, masks_m, cm)
    return l_audio + l_motion, l_audio, l_motion


def cfg_combine(v_cond, v_uncond, gamma):
    """Classifier-free guidance: v_cond + gamma * (v_cond - v_uncond)."""
    v_cond = np.asarray(v_cond)
    v_uncond = np.asarray(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"cfg_combine: shapes differ, {v_cond.shape} vs {v_uncond.shape}")
    return v_cond + gamma * (v_cond - v_uncond)


def condition_arrays(conds, la, lm, cfg):
    """Expand SamplingConditions into the model's channel inputs.

    Returns (audio_cond, audio_ind, text_ids, text_keep, motion_cond,
    motion_ind, rest) where indicators are 1.0 on frames to generate.
    """
    dt = nm.default_dtype()
    if conds.audio is not None:
        audio = np.asarray(conds.audio, dtype=dt)
        if audio.shape != (la, cfg.audio_channels):
            raise ShapeError(
                f"conditions: audio shape {audio.shape} != ({la}, {cfg.audio_channels})"
            )
        known = (np.ones(la, dtype=bool) if conds.audio_known is None
                 else np.asarray(conds.audio_known, dtype=bool))
        a_cond = audio * known[:, None]
        a_ind = (~known).astype(dt)
    else:
        a_cond = np.zeros((la, cfg.audio_channels), dtype=dt)
        a_ind = np.ones(la, dtype=dt)
    if conds.motion is not None:
        motion = np.asarray(conds.motion, dtype=dt)
        if motion.shape != (lm, cfg.motion_channels):
            raise ShapeError(
                f"conditions: motion shape {motion.shape} != ({lm}, {cfg.motion_channels})"
            )
        known = (np.ones(lm, dtype=bool) if conds.motion_known is None
                 else np.asarray(conds.motion_known, dtype=bool))
        m_cond = motion * known[:, None]
        m_ind = (~known).astype(dt)
    else:
        m_cond = np.zeros((lm, cfg.motion_channels), dtype=dt)
        m_ind = np.ones(lm, dtype=dt)
    if conds.text_tokens is not None:
        ids = np.zeros(la, dtype=np.int64)
        toks = np.asarray(conds.text_tokens, dtype=np.int64)
        if toks.size > la:
            raise ShapeError(f"conditions: {toks.size} text tokens > L_a {la}")
        ids[: toks.size] = toks
        keep = 1.0
    else:
        ids = np.zeros(la, dtype=np.int64)
        keep = 0.0
    if conds.rest is not None:
        rest = np.asarray(conds.rest, dtype=dt)
        if rest.shape != (lm, cfg.rest_channels):
            raise ShapeError(
                f"conditions: rest shape {rest.shape} != ({lm}, {cfg.rest_channels})"
            )
    else:
        rest = np.zeros((lm, cfg.rest_channels), dtype=dt)
    return a_cond, a_ind, ids, keep, m_cond, m_ind, rest


def model_field(model, conds, la, lm, scfg):
    """Wrap a model and its conditions as a velocity field callable
    field(x_a, x_m, t, dropped) -> (v_a, v_m)."""
    cfg = model.cfg
    a_cond, a_ind, ids, keep, m_cond, m_ind, rest = condition_arrays(conds, la, lm, cfg)
    dt = nm.default_dtype()
    zeros_a = np.zeros_like(a_cond)
    zeros_m = np.zeros_like(m_cond)
    zeros_r = np.zeros_like(rest)
    ones_a = np.ones(la, dtype=dt)
    ones_m = np.ones(lm, dtype=dt)

    def fn(x_a, x_m, t, dropped):
        if dropped:
            return model.velocity_pair(
                t=t, audio_noisy=x_a, audio_cond=zeros_a, audio_ind=ones_a,
                text_ids=None, text_keep=0.0,
                motion_noisy=x_m, motion_cond=zeros_m, motion_ind=ones_m,
                rest=zeros_r, joint=scfg.joint_uncond,
            )
        return model.velocity_pair(
            t=t, audio_noisy=x_a, audio_cond=a_cond, audio_ind=a_ind,
            text_ids=ids, text_keep=keep,
            motion_noisy=x_m, motion_cond=m_cond, motion_ind=m_ind,
            rest=rest, joint=True,
        )

    return fn


def euler_sample(field, conds, la, lm, ca, cm, scfg, step_hook=None):
    """Integrate the field from seeded noise over nfe uniform steps.

    field(x_a, x_m, t, dropped) -> (v_a, v_m); when scfg.cfg_scale > 0
    each step evaluates the field twice (conditional and dropped) and
    combines them; at 0 the dropped pass is skipped entirely.  Known
    frames are re-imposed on the interpolation path after every step.
    step_hook(step, t, v_cond, v_uncond, v_used) sees each step's raw
    and combined fields (v_uncond is None when the pass was skipped).
    Returns (audio, motion) arrays at t=1.
    """
    if scfg.nfe < 1:
        raise ValueError(f"euler_sample: nfe must be >= 1, got {scfg.nfe}")
    if scfg.cfg_scale < 0:
        raise ValueError(f"euler_sample: cfg_scale must be >= 0, got {scfg.cfg_scale}")
    dt_ = nm.default_dtype()
    x_a = rng.stream(scfg.seed, "sample", "init_audio").standard_normal((la, ca)).astype(dt_)
    x_m = rng.stream(scfg.seed, "sample", "init_motion").standard_normal((lm, cm)).astype(dt_)
    x0_a, x0_m = x_a.copy(), x_m.copy()

    a_known = None
    if conds.audio is not None:
        a_known = (np.ones(la, dtype=bool) if conds.audio_known is None
                   else np.asarray(conds.audio_known, dtype=bool))
        a_ref = np.asarray(conds.audio, dtype=dt_)
    m_known = None
    if conds.motion is not None:
        m_known = (np.ones(lm, dtype=bool) if conds.motion_known is None
                   else np.asarray(conds.motion_known, dtype=bool))
        m_ref = np.asarray(conds.motion, dtype=dt_)

    h = 1.0 / scfg.nfe
    for i in range(scfg.nfe):
        t = i / scfg.nfe
        vc_a, vc_m = field(x_a, x_m, t, False)
        if scfg.cfg_scale > 0.0:
            vu_a, vu_m = field(x_a, x_m, t, True)
            v_a = cfg_combine(vc_a, vu_a, scfg.cfg_scale)
            v_m = cfg_combine(vc_m, vu_m, scfg.cfg_scale)
            v_uncond = (vu_a, vu_m)
        else:
            v_a, v_m = vc_a, vc_m
            v_uncond = None
        if step_hook is not None:
            step_hook(i, t, (vc_a, vc_m), v_uncond, (v_a, v_m))
        x_a = x_a + h * v_a
        x_m = x_m + h * v_m
        t_next = (i + 1) / scfg.nfe
        if a_known is not None:
            x_a[a_known] = (1.0 - t_next) * x0_a[a_known] + t_next * a_ref[a_known]
        if m_known is not None:
            x_m[m_known] = (1.0 - t_next) * x0_m[m_known] + t_next * m_ref[m_known]
        if not (np.all(np.isfinite(x_a)) and np.all(np.isfinite(x_m))):
            raise NumericError(f"euler_sample: non-finite state at step {i}")
    return x_a, x_m


def sample_pair(model, conds, lm, scfg, step_hook=None):
    """Convenience: build the model field and sample one (audio, motion)
    pair with L_m motion frames."""
    cfg = model.cfg
    la = cfg.audio_len(lm)
    fld = model_field(model, conds, la, lm, scfg)
    return euler_sample(fld, conds, la, lm, cfg.audio_channels,
                        cfg.motion_channels, scfg, step_hook=step_hook)
