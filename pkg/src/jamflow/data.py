"""Synthetic coupled audio/motion sequences.

Each sample is built from a random token string over a shared fixed
"language": every token id owns a spectral profile and a motion
profile, drawn once from streams keyed by the token id alone, so the
token-to-sound and token-to-motion mappings are identical across
samples and corpora.  Audio frames are the active token's profile
under a raised-sine envelope plus small noise; motion channel 0 is a
causal exponential moving average (decay 0.5) of per-motion-frame mean
audio energy, making the cross-modal law exact on clean data; the
remaining motion channels trace the active token's motion profile.
Rest-motion channels are smooth noise, independent of everything else.

Also here: inpainting masks, condition dropout, and the keypoint
composition utility X = s (x_c R + e) + t.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from . import rng
from .numerics import ShapeError


@dataclass
class SequenceSample:
    audio: np.ndarray          # (L_a, audio_channels)
    motion: np.ndarray         # (L_m, motion_channels)
    rest: np.ndarray           # (L_m, rest_channels)
    text_tokens: np.ndarray    # (n_tokens,) vocab ids, n_tokens <= L_a
    audio_feat: np.ndarray     # (L_m,) per-motion-frame audio energy
    seed: int
    index: int
    audio_mask: np.ndarray | None = None   # True = frame to generate
    motion_mask: np.ndarray | None = None


@dataclass
class DropoutSpec:
    p_audio: float = 0.1
    p_motion: float = 0.1
    p_text: float = 0.2
    p_rest: float = 0.8

    def validate(self):
        for name in ("p_audio", "p_motion", "p_text", "p_rest"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"dropout: {name} must lie in [0, 1], got {p}")


@dataclass
class DropFlags:
    audio: bool = False
    motion: bool = False
    text: bool = False
    rest: bool = False


@dataclass
class ConditionedSample:
    """A sample with masks drawn and dropout applied: everything one
    training step needs for one item."""
    audio: np.ndarray
    motion: np.ndarray
    audio_mask: np.ndarray
    motion_mask: np.ndarray
    audio_cond: np.ndarray
    audio_ind: np.ndarray
    motion_cond: np.ndarray
    motion_ind: np.ndarray
    rest_cond: np.ndarray
    text_ids: np.ndarray
    text_keep: float
    audio_feat: np.ndarray
    flags: DropFlags


# -- keypoint composition -----------------------------------------------------


@dataclass
class KeypointParams:
    canonical: np.ndarray    # (21, 3)
    rotation: np.ndarray     # (3, 3), orthogonal
    expression: np.ndarray   # (21, 3)
    scale: float
    translation: np.ndarray  # (3,)


def compose_keypoints(p):
    """Final keypoints: scale * (canonical @ rotation + expression) + translation."""
    r = np.asarray(p.rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise ShapeError(f"compose_keypoints: rotation shape {r.shape} != (3, 3)")
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
        raise ValueError("compose_keypoints: rotation is not orthogonal")
    if p.scale <= 0:
        raise ValueError(f"compose_keypoints: scale must be > 0, got {p.scale}")
    xc = np.asarray(p.canonical, dtype=np.float64)
    e = np.asarray(p.expression, dtype=np.float64)
    if xc.shape != (21, 3) or e.shape != (21, 3):
        raise ShapeError(
            f"compose_keypoints: canonical {xc.shape} / expression {e.shape} != (21, 3)"
        )
    return p.scale * (xc @ r + e) + np.asarray(p.translation, dtype=np.float64)


MOUTH_KEYPOINTS = (17, 18, 19, 20)


def mouth_channels(x):
    """Flatten the mouth keypoints of a (21, 3) frame into 12 channels."""
    x = np.asarray(x)
    if x.shape != (21, 3):
        raise ShapeError(f"mouth_channels: frame shape {x.shape} != (21, 3)")
    return x[list(MOUTH_KEYPOINTS)].reshape(12)


# -- sample synthesis ---------------------------------------------------------

# Token profiles come from streams keyed by token id only (seed 0), so
# every corpus speaks the same language.
_LANG_SEED = 0


def _token_audio_profile(token, channels):
    return rng.stream(_LANG_SEED, "token_audio", int(token)).uniform(-1.0, 1.0, channels)


def _token_motion_profile(token, channels):
    return rng.stream(_LANG_SEED, "token_motion", int(token)).uniform(-1.0, 1.0, channels)


def smoothed_energy(audio, n_motion):
    """Per-motion-frame mean audio energy, then a causal EMA with decay
    0.5.  This is the law motion channel 0 follows (up to the fixed
    output gain); evaluation reuses it as the sync reference."""
    audio = np.asarray(audio, dtype=np.float64)
    la = audio.shape[0]
    e_frame = (audio * audio).mean(axis=1)
    edges = [(j * la) // n_motion for j in range(n_motion + 1)]
    e = np.array([e_frame[edges[j] : max(edges[j + 1], edges[j] + 1)].mean()
                  for j in range(n_motion)])
    s = np.empty(n_motion)
    s[0] = e[0]
    for j in range(1, n_motion):
        s[j] = 0.5 * s[j - 1] + 0.5 * e[j]
    return s, e


MOTION_GAIN = 2.0


def generate_coupled_sample(seed, cfg, n_motion, index=0):
    """One deterministic coupled sample; streams keyed (seed, index)."""
    if n_motion < 8:
        raise ValueError(f"generate_coupled_sample: L_m must be >= 8, got {n_motion}")
    if cfg.text_vocab < 2:
        raise ValueError("generate_coupled_sample: vocab has no non-filler tokens")
    la = cfg.audio_len(n_motion)
    dt = nm.default_dtype()

    def gen(tag):
        return rng.stream(seed, "data", index, tag)

    n_tok = max(2, n_motion // 2)
    tokens = gen("tokens").integers(1, cfg.text_vocab, size=n_tok)
    edges = [(k * la) // n_tok for k in range(n_tok + 1)]

    audio = np.zeros((la, cfg.audio_channels))
    tok_of_frame = np.zeros(la, dtype=np.int64)
    pos_in_span = np.zeros(la)
    for k in range(n_tok):
        lo, hi = edges[k], max(edges[k + 1], edges[k] + 1)
        span = hi - lo
        prof = _token_audio_profile(tokens[k], cfg.audio_channels)
        u = (np.arange(span) + 0.5) / span
        amp = 0.15 + 0.85 * np.sin(np.pi * u)
        audio[lo:hi] = prof[None, :] * amp[:, None]
        tok_of_frame[lo:hi] = tokens[k]
        pos_in_span[lo:hi] = u
    audio += 0.02 * gen("audio_noise").standard_normal(audio.shape)

    s, e = smoothed_energy(audio, n_motion)
    motion = np.zeros((n_motion, cfg.motion_channels))
    motion[:, 0] = MOTION_GAIN * s
    m_edges = [(j * la) // n_motion for j in range(n_motion)]
    for j in range(n_motion):
        i = m_edges[j]
        tok = tok_of_frame[i]
        mprof = _token_motion_profile(tok, cfg.motion_channels - 1)
        motion[j, 1:] = mprof * np.sin(np.pi * pos_in_span[i])

    raw = gen("rest").standard_normal((n_motion + 4, cfg.rest_channels))
    kernel = np.ones(5) / 5.0
    rest = np.stack(
        [np.convolve(raw[:, c], kernel, mode="valid") for c in range(cfg.rest_channels)],
        axis=1,
    ) * 0.7

    return SequenceSample(
        audio=audio.astype(dt), motion=motion.astype(dt), rest=rest.astype(dt),
        text_tokens=tokens.astype(np.int64), audio_feat=e.astype(dt),
        seed=seed, index=index,
    )


def build_corpus(seed, cfg, n_samples, lm_min, lm_max):
    """n_samples coupled sequences with motion lengths drawn uniformly
    from the ratio-compatible lengths in [lm_min, lm_max]."""
    valid = []
    for l in range(lm_min, lm_max + 1):
        try:
            cfg.audio_len(l)
        except ShapeError:
            continue
        valid.append(l)
    if not valid:
        raise ValueError(
            f"build_corpus: no motion length in [{lm_min}, {lm_max}] gives an "
            f"integer audio length at ratio {cfg.frame_ratio}"
        )
    out = []
    for i in range(n_samples):
        lm = valid[int(rng.stream(seed, "corpus", i).integers(0, len(valid)))]
        out.append(generate_coupled_sample(seed, cfg, lm, index=i))
    return out


# -- masks and dropout --------------------------------------------------------


def make_inpaint_mask(length, gen, min_frac=0.3, max_frac=1.0, full_prob=0.1):
    """Boolean mask with one contiguous True span covering a uniform
    fraction in [min_frac, max_frac] of the frames; with probability
    full_prob the whole sequence is True (pure generation).  Span size
    is clamped to the rounded bounds, so very tight fraction ranges on
    short sequences may round to the nearer representable size."""
    if length < 1:
        raise ValueError(f"make_inpaint_mask: length must be >= 1, got {length}")
    if min_frac > max_frac:
        raise ValueError(
            f"make_inpaint_mask: min_frac {min_frac} > max_frac {max_frac}"
        )
    if not 0.0 <= full_prob <= 1.0:
        raise ValueError(f"make_inpaint_mask: full_prob must lie in [0, 1], got {full_prob}")
    mask = np.zeros(length, dtype=bool)
    if gen.random() < full_prob:
        mask[:] = True
        return mask
    frac = gen.uniform(min_frac, max_frac)
    lo = max(1, int(np.ceil(min_frac * length)))
    hi = max(lo, int(np.floor(max_frac * length)))
    n = int(np.clip(round(frac * length), lo, hi))
    start = int(gen.integers(0, length - n + 1))
    mask[start : start + n] = True
    return mask


def apply_condition_dropout(sample, spec, gen):
    """Zero out whole conditions with the spec's probabilities.

    The inpainting zeroing (masked frames removed from the condition)
    is applied first; dropout then replaces entire conditions with
    zeros and flips the indicator to all-unknown.  Draw order is fixed:
    audio, motion, text, rest.  Returns a ConditionedSample.
    """
    spec.validate()
    if sample.audio_mask is None or sample.motion_mask is None:
        raise ValueError("apply_condition_dropout: sample has no inpaint masks")
    dt = nm.default_dtype()
    a_mask = np.asarray(sample.audio_mask, dtype=bool)
    m_mask = np.asarray(sample.motion_mask, dtype=bool)
    d_audio = bool(gen.random() < spec.p_audio)
    d_motion = bool(gen.random() < spec.p_motion)
    d_text = bool(gen.random() < spec.p_text)
    d_rest = bool(gen.random() < spec.p_rest)

    la = sample.audio.shape[0]
    if d_audio:
        audio_cond = np.zeros_like(sample.audio)
        audio_ind = np.ones(la, dtype=dt)
        audio_feat = np.zeros_like(sample.audio_feat)
    else:
        audio_cond = sample.audio * (~a_mask)[:, None]
        audio_ind = a_mask.astype(dt)
        audio_feat = sample.audio_feat.copy()
    lm = sample.motion.shape[0]
    if d_motion:
        motion_cond = np.zeros_like(sample.motion)
        motion_ind = np.ones(lm, dtype=dt)
    else:
        motion_cond = sample.motion * (~m_mask)[:, None]
        motion_ind = m_mask.astype(dt)
    rest_cond = np.zeros_like(sample.rest) if d_rest else sample.rest.copy()
    text_ids = np.zeros(la, dtype=np.int64)
    text_ids[: sample.text_tokens.size] = sample.text_tokens
    return ConditionedSample(
        audio=sample.audio, motion=sample.motion,
        audio_mask=a_mask, motion_mask=m_mask,
        audio_cond=audio_cond.astype(dt), audio_ind=audio_ind,
        motion_cond=motion_cond.astype(dt), motion_ind=motion_ind,
        rest_cond=rest_cond.astype(dt), text_ids=text_ids,
        text_keep=0.0 if d_text else 1.0,
        audio_feat=audio_feat.astype(dt),
        flags=DropFlags(d_audio, d_motion, d_text, d_rest),
    )


def conditioned_item(sample, spec, gen, min_frac=0.3, max_frac=1.0, full_prob=0.1):
    """Draw both inpaint masks, then apply dropout; one generator, fixed
    draw order (audio mask, motion mask, four dropout draws)."""
    sample.audio_mask = make_inpaint_mask(sample.audio.shape[0], gen,
                                          min_frac, max_frac, full_prob)
    sample.motion_mask = make_inpaint_mask(sample.motion.shape[0], gen,
                                           min_frac, max_frac, full_prob)
    return apply_condition_dropout(sample, spec, gen)
