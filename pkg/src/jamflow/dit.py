"""Dual-stream diffusion transformer with partially joint layers.

Two stacks of pre-norm transformer blocks, one per modality, gated by
timestep-conditioned modulation (adaLN with zero-initialized gates, so
every block starts as the identity).  Blocks flagged joint couple the
streams through pooled-key attention; the remaining blocks attend
within their own stream.  Inputs enter by channel concatenation:
noisy frames, masked condition frames, a known/unknown indicator
channel, and per-stream extras (text embeddings for audio; rest-motion
channels and, in standalone training, one audio-feature channel for
motion).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from . import rng
from .attention import (
    AttentionParams,
    JointMask,
    audio_query_mask,
    joint_attention,
    motion_query_mask,
    self_mask,
)
from .numerics import ShapeError, Tensor
from .rope import RopeTable


@dataclass
class ModelConfig:
    n_layers: int = 6        # reference-scale 22
    n_joint: int = 3         # reference-scale 11, first half
    hidden: int = 128        # reference-scale 1024
    heads: int = 4           # reference-scale 16
    head_dim: int = 32       # reference-scale 64
    audio_channels: int = 16  # reference-scale 100
    motion_channels: int = 12  # 4 mouth keypoints x 3 coords
    rest_channels: int = 6   # reference-scale 51
    text_vocab: int = 32
    text_embed: int = 8
    frame_ratio: float = 4.0  # reference-scale 3.75 (audio frames per motion frame)
    window: int = 4
    ff_mult: int = 2         # reference-style 4
    rope_base: float = 10000.0
    joint_layout: str = "first"  # or "interleaved"

    def validate(self):
        if self.n_joint > self.n_layers or self.n_joint < 0:
            raise ValueError(f"config: n_joint {self.n_joint} not in [0, {self.n_layers}]")
        if self.hidden != self.heads * self.head_dim:
            raise ValueError(
                f"config: hidden {self.hidden} != heads*head_dim "
                f"{self.heads * self.head_dim}"
            )
        if self.head_dim % 2 != 0:
            raise ValueError(f"config: head_dim must be even, got {self.head_dim}")
        if self.hidden % 2 != 0:
            raise ValueError(f"config: hidden must be even, got {self.hidden}")
        if self.frame_ratio <= 0:
            raise ValueError(f"config: frame_ratio must be > 0, got {self.frame_ratio}")
        if self.window < 0:
            raise ValueError(f"config: window must be >= 0, got {self.window}")
        if self.joint_layout not in ("first", "interleaved"):
            raise ValueError(f"config: unknown joint_layout '{self.joint_layout}'")
        if self.text_vocab < 2:
            raise ValueError(f"config: text_vocab must be >= 2, got {self.text_vocab}")

    def audio_len(self, n_motion):
        """Audio frame count paired with n_motion motion frames."""
        la = self.frame_ratio * n_motion
        if abs(la - round(la)) > 1e-9:
            raise ShapeError(
                f"config: frame_ratio {self.frame_ratio} * L_m {n_motion} "
                f"is not an integer frame count"
            )
        return int(round(la))

    def joint_flags(self):
        if self.joint_layout == "first":
            return [i < self.n_joint for i in range(self.n_layers)]
        # Evenly spread the joint blocks through the stack.
        flags = [False] * self.n_layers
        if self.n_joint:
            for k in range(self.n_joint):
                flags[(k * self.n_layers) // self.n_joint] = True
        return flags


class Linear:
    def __init__(self, w, b):
        self.w = w
        self.b = b

    @classmethod
    def create(cls, n_in, n_out, gen, zero=False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            bound = math.sqrt(6.0 / (n_in + n_out))
            w = gen.uniform(-bound, bound, size=(n_in, n_out))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True))

    def __call__(self, x):
        return nm.linear(x, self.w, self.b)

    def named(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


@dataclass
class ModulationParams:
    """Per-block gating vectors, each (B, 1, hidden) for broadcasting."""
    s_attn: Tensor
    e_attn: Tensor
    g_msa: Tensor
    s_ff: Tensor
    e_ff: Tensor
    g_ff: Tensor


def adaln_modulate(x, t_emb, mod_linear):
    """Pre-attention modulation: returns (x_hat, ModulationParams).

    x: (B, L, hidden); t_emb: (B, hidden).  The projection input is
    SiLU(t_emb); its six hidden-sized output segments are, in order,
    (s_attn, e_attn, g_msa, s_ff, e_ff, g_ff).  All are zero at init,
    so x_hat = LN(x) and both residual gates vanish.
    """
    if x.data.ndim != 3 or t_emb.data.ndim != 2 or x.data.shape[0] != t_emb.data.shape[0]:
        raise ShapeError(
            f"adaln_modulate: x {x.data.shape} and t_emb {t_emb.data.shape} mismatch"
        )
    B = x.data.shape[0]
    H = x.data.shape[2]
    mod = mod_linear(nm.silu(t_emb))
    if mod.data.shape[1] != 6 * H:
        raise ShapeError(f"adaln_modulate: projection width {mod.data.shape[1]} != 6*{H}")
    parts = [nm.reshape(nm.narrow(mod, 1, k * H, H), (B, 1, H)) for k in range(6)]
    m = ModulationParams(*parts)
    x_hat = nm.modulated_norm(x, m.e_attn, m.s_attn)
    return x_hat, m


class BlockParams:
    """One branch's share of a transformer block."""

    def __init__(self, cfg, gen, joint):
        h = cfg.hidden
        self.joint = joint
        self.attn = AttentionParams.create(h, cfg.heads, cfg.head_dim, gen)
        self.ff1 = Linear.create(h, cfg.ff_mult * h, gen)
        self.ff2 = Linear.create(cfg.ff_mult * h, h, gen)
        self.mod = Linear.create(h, 6 * h, gen, zero=True)

    def ff(self, x):
        return self.ff2(nm.gelu(self.ff1(x)))

    def named(self, prefix):
        out = self.attn.named(f"{prefix}.attn")
        out.update(self.ff1.named(f"{prefix}.ff1"))
        out.update(self.ff2.named(f"{prefix}.ff2"))
        out.update(self.mod.named(f"{prefix}.mod"))
        return out


def _ff_branch(blk, x, m):
    x_tilde = nm.modulated_norm(x, m.e_ff, m.s_ff)
    return nm.gated_add(x, m.g_ff, blk.ff(x_tilde))


def joint_dit_block(
    blk1, blk2, x1, t1_emb, x2, t2_emb,
    rope1=None, rope2=None, mask1=None, mask2=None,
    alpha1=1, alpha2=1, literal_pooling=False,
):
    """One dual-stream block: modulate, attend (possibly pooled),
    gated residual, modulated feed-forward, gated residual."""
    xh1, m1 = adaln_modulate(x1, t1_emb, blk1.mod)
    xh2, m2 = adaln_modulate(x2, t2_emb, blk2.mod)
    a1, a2 = joint_attention(
        blk1.attn, xh1, blk2.attn, xh2,
        rope1=rope1, rope2=rope2, mask1=mask1, mask2=mask2,
        alpha1=alpha1, alpha2=alpha2, literal_pooling=literal_pooling,
    )
    x1 = nm.gated_add(x1, m1.g_msa, a1)
    x2 = nm.gated_add(x2, m2.g_msa, a2)
    return _ff_branch(blk1, x1, m1), _ff_branch(blk2, x2, m2)


def single_dit_block(blk, x, t_emb, rope=None, mask=None):
    """The same block run standalone (no cross-stream pooling)."""
    xh, m = adaln_modulate(x, t_emb, blk.mod)
    a, _ = joint_attention(blk.attn, xh, rope1=rope, mask1=mask, alpha1=0)
    x = nm.gated_add(x, m.g_msa, a)
    return _ff_branch(blk, x, m)


class Branch:
    """One modality's stack: input projection, timestep embedder,
    blocks, modulated final norm, linear head."""

    def __init__(self, cfg, seed, name, in_dim, out_dim, flags, with_text, with_feat):
        h = cfg.hidden
        def gen(tag):
            return rng.stream(seed, "init", f"{name}.{tag}")
        self.name = name
        self.in_proj = Linear.create(in_dim, h, gen("in"))
        self.text_table = None
        if with_text:
            self.text_table = Tensor(
                gen("text").normal(0.0, 0.02, size=(cfg.text_vocab, cfg.text_embed)),
                requires_grad=True,
            )
        self.in_feat = None
        if with_feat:
            # Standalone-training audio-feature pathway; unused (and not
            # loaded) once the streams are trained jointly.
            self.in_feat = Linear.create(1, h, gen("in_feat"), zero=True)
        self.time_l1 = Linear.create(h, h, gen("time.l1"))
        self.time_l2 = Linear.create(h, h, gen("time.l2"))
        self.blocks = [BlockParams(cfg, gen(f"blocks.{i}"), flags[i]) for i in range(cfg.n_layers)]
        self.final_mod = Linear.create(h, 2 * h, gen("final"), zero=True)
        self.head = Linear.create(h, out_dim, gen("head"), zero=True)
        self.hidden = h

    def t_embed(self, t):
        """t: (B,) floats in [0,1] -> (B, hidden) embedding."""
        t = np.asarray(t, dtype=np.float64)
        if t.ndim != 1:
            raise ShapeError(f"t_embed: t must be 1-d, got {t.shape}")
        if t.size and (t.min() < 0.0 or t.max() > 1.0):
            raise ValueError(f"t_embed: t must lie in [0, 1], got [{t.min()}, {t.max()}]")
        half = self.hidden // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        ang = t[:, None] * 1000.0 * freqs[None, :]
        feats = np.concatenate([np.cos(ang), np.sin(ang)], axis=1)
        feats = Tensor(feats.astype(nm.default_dtype()))
        return self.time_l2(nm.silu(self.time_l1(feats)))

    def final(self, x, t_emb):
        B, L, H = x.data.shape
        mod = self.final_mod(nm.silu(t_emb))
        shift = nm.reshape(nm.narrow(mod, 1, 0, H), (B, 1, H))
        scl = nm.reshape(nm.narrow(mod, 1, H, H), (B, 1, H))
        return self.head(nm.modulated_norm(x, scl, shift))

    def named(self):
        p = self.name
        out = self.in_proj.named(f"{p}.in")
        if self.text_table is not None:
            out[f"{p}.text.table"] = self.text_table
        if self.in_feat is not None:
            out.update(self.in_feat.named(f"{p}.in_feat"))
        out.update(self.time_l1.named(f"{p}.time.l1"))
        out.update(self.time_l2.named(f"{p}.time.l2"))
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{p}.blocks.{i}"))
        out.update(self.final_mod.named(f"{p}.final"))
        out.update(self.head.named(f"{p}.head"))
        return out


# Parameter names that exist only for standalone (stage-1) training and
# are deliberately absent from joint training and checkpoint loads.
STAGE1_ONLY = ("motion.in_feat.w", "motion.in_feat.b")


class JamModel:
    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        flags = cfg.joint_flags()
        audio_in = 2 * cfg.audio_channels + 1 + cfg.text_embed
        motion_in = 2 * cfg.motion_channels + 1 + cfg.rest_channels
        self.audio = Branch(cfg, seed, "audio", audio_in, cfg.audio_channels,
                            flags, with_text=True, with_feat=False)
        self.motion = Branch(cfg, seed, "motion", motion_in, cfg.motion_channels,
                             flags, with_text=False, with_feat=True)
        self.joint = flags
        self._ropes = {}
        self._masks = {}

    # -- parameter access ---------------------------------------------------

    def parameters(self, stage="2_joint"):
        """name -> Tensor for the parameters the stage trains."""
        out = {}
        out.update(self.audio.named())
        out.update(self.motion.named())
        if stage == "1_audio":
            out = {k: v for k, v in out.items() if k.startswith("audio.")}
        elif stage == "1_motion":
            out = {k: v for k, v in out.items() if k.startswith("motion.")}
        elif stage == "2_joint":
            out = {k: v for k, v in out.items() if k not in STAGE1_ONLY}
        else:
            raise ValueError(f"parameters: unknown stage '{stage}'")
        return out

    # -- cached geometry ----------------------------------------------------

    def ropes(self, la, lm):
        """Scaled rotary tables for a (L_a, L_m) pair; the longer stream
        is the angle reference."""
        key = (la, lm, nm.default_dtype())
        if key not in self._ropes:
            ref = max(la, lm)
            self._ropes[key] = (
                RopeTable(la, ref, self.cfg.head_dim, self.cfg.rope_base),
                RopeTable(lm, ref, self.cfg.head_dim, self.cfg.rope_base),
            )
        return self._ropes[key]

    def rope_single(self, length):
        key = (length, length, nm.default_dtype())
        if key not in self._ropes:
            self._ropes[key] = (RopeTable(length, length, self.cfg.head_dim, self.cfg.rope_base),)
        return self._ropes[key][0]

    def masks(self, la, lm):
        key = (la, lm)
        if key not in self._masks:
            self._masks[key] = (
                audio_query_mask(la, lm),
                motion_query_mask(lm, la, self.cfg.window),
                self_mask(lm, self.cfg.window),
            )
        return self._masks[key]

    # -- forward passes -----------------------------------------------------

    def _audio_entry(self, noisy, cond, ind, text_ids, text_keep):
        B, La, _ = noisy.shape
        dt = nm.default_dtype()
        base = np.concatenate(
            [noisy, cond, np.asarray(ind, dtype=dt)[..., None]], axis=-1
        ).astype(dt)
        if text_ids is None:
            text_ids = np.zeros((B, La), dtype=np.int64)
        emb = nm.embedding(self.audio.text_table, np.asarray(text_ids))
        keep = np.asarray(text_keep, dtype=dt).reshape(B, 1, 1)
        emb = emb * keep
        x = nm.concat([Tensor(base), emb], axis=-1)
        return self.audio.in_proj(x)

    def _motion_entry(self, noisy, cond, ind, rest, audio_feat):
        dt = nm.default_dtype()
        base = np.concatenate(
            [noisy, cond, np.asarray(ind, dtype=dt)[..., None], rest], axis=-1
        ).astype(dt)
        x = self.motion.in_proj(Tensor(base))
        if audio_feat is not None:
            if self.motion.in_feat is None:
                raise ShapeError("forward: this model has no audio-feature pathway")
            feat = Tensor(np.asarray(audio_feat, dtype=dt)[..., None])
            x = x + self.motion.in_feat(feat)
        return x

    def _check_pair(self, la, lm):
        want = self.cfg.audio_len(lm)
        if la != want:
            raise ShapeError(
                f"forward: audio length {la} != frame_ratio*motion length "
                f"({self.cfg.frame_ratio}*{lm} = {want})"
            )

    def forward_batch(
        self, *,
        t_audio, t_motion,
        audio_noisy, audio_cond, audio_ind, text_ids, text_keep,
        motion_noisy, motion_cond, motion_ind, rest,
        joint_audio=True, joint_motion=True,
        literal_pooling=False,
    ):
        """Batched dual-stream forward; all inputs are numpy arrays.

        Returns (v_audio, v_motion) Tensors of the noisy inputs' shapes.
        """
        B, la, ca = audio_noisy.shape
        _, lm, cm = motion_noisy.shape
        if ca != self.cfg.audio_channels or cm != self.cfg.motion_channels:
            raise ShapeError(
                f"forward: channels ({ca}, {cm}) != config "
                f"({self.cfg.audio_channels}, {self.cfg.motion_channels})"
            )
        self._check_pair(la, lm)
        xa = self._audio_entry(audio_noisy, audio_cond, audio_ind, text_ids, text_keep)
        xm = self._motion_entry(motion_noisy, motion_cond, motion_ind, rest, None)
        ta = self.audio.t_embed(t_audio)
        tm = self.motion.t_embed(t_motion)
        rope_a, rope_m = self.ropes(la, lm)
        amask, mmask, m_self = self.masks(la, lm)
        for blk_a, blk_m in zip(self.audio.blocks, self.motion.blocks):
            a1 = 1 if (blk_a.joint and joint_audio) else 0
            a2 = 1 if (blk_m.joint and joint_motion) else 0
            xa, xm = joint_dit_block(
                blk_a, blk_m, xa, ta, xm, tm,
                rope1=rope_a, rope2=rope_m,
                mask1=amask if a1 else None,
                mask2=mmask if a2 else m_self,
                alpha1=a1, alpha2=a2,
                literal_pooling=literal_pooling,
            )
        return self.audio.final(xa, ta), self.motion.final(xm, tm)

    def forward_audio_only(self, *, t, audio_noisy, audio_cond, audio_ind,
                           text_ids, text_keep):
        """Standalone audio stream (full self-attention, own-length rope)."""
        la = audio_noisy.shape[1]
        x = self._audio_entry(audio_noisy, audio_cond, audio_ind, text_ids, text_keep)
        te = self.audio.t_embed(t)
        rope = self.rope_single(la)
        for blk in self.audio.blocks:
            x = single_dit_block(blk, x, te, rope=rope)
        return self.audio.final(x, te)

    def forward_motion_only(self, *, t, motion_noisy, motion_cond, motion_ind,
                            rest, audio_feat):
        """Standalone motion stream (windowed self-attention)."""
        lm = motion_noisy.shape[1]
        x = self._motion_entry(motion_noisy, motion_cond, motion_ind, rest, audio_feat)
        te = self.motion.t_embed(t)
        rope = self.rope_single(lm)
        mask = self_mask(lm, self.cfg.window)
        for blk in self.motion.blocks:
            x = single_dit_block(blk, x, te, rope=rope, mask=mask)
        return self.motion.final(x, te)

    def velocity_pair(self, *, t, audio_noisy, audio_cond, audio_ind, text_ids,
                      text_keep, motion_noisy, motion_cond, motion_ind, rest,
                      joint=True):
        """Sampler seam: single-item numpy in, numpy velocity fields out."""
        with nm.no_grad():
            va, vm = self.forward_batch(
                t_audio=np.array([t]), t_motion=np.array([t]),
                audio_noisy=audio_noisy[None], audio_cond=audio_cond[None],
                audio_ind=audio_ind[None],
                text_ids=None if text_ids is None else np.asarray(text_ids)[None],
                text_keep=np.array([text_keep]),
                motion_noisy=motion_noisy[None], motion_cond=motion_cond[None],
                motion_ind=motion_ind[None], rest=rest[None],
                joint_audio=joint, joint_motion=joint,
            )
        return va.data[0], vm.data[0]


def forward_jam(
    model, noisy_audio, audio_cond, text_tokens,
    noisy_motion, motion_cond, rest_motion,
    t_audio, t_motion,
    joint_audio=True, joint_motion=True,
    audio_gen_mask=None, motion_gen_mask=None,
    text_keep=1.0,
):
    """Single-sample dual forward.

    Arrays are (L, C); text_tokens is a 1-d id list, filler-padded here
    to L_a with id 0.  *_gen_mask marks frames to be generated (these
    become the indicator channel); None means everything is generated.
    Returns (v_audio, v_motion) Tensors.
    """
    noisy_audio = np.asarray(noisy_audio)
    noisy_motion = np.asarray(noisy_motion)
    la, lm = noisy_audio.shape[0], noisy_motion.shape[0]
    a_ind = np.ones(la) if audio_gen_mask is None else np.asarray(audio_gen_mask, dtype=float)
    m_ind = np.ones(lm) if motion_gen_mask is None else np.asarray(motion_gen_mask, dtype=float)
    if text_tokens is None:
        ids = np.zeros(la, dtype=np.int64)
        text_keep = 0.0
    else:
        ids = np.zeros(la, dtype=np.int64)
        toks = np.asarray(text_tokens, dtype=np.int64)
        if toks.size > la:
            raise ShapeError(f"forward_jam: {toks.size} text tokens > L_a {la}")
        ids[: toks.size] = toks
    va, vm = model.forward_batch(
        t_audio=np.array([float(t_audio)]), t_motion=np.array([float(t_motion)]),
        audio_noisy=noisy_audio[None], audio_cond=np.asarray(audio_cond)[None],
        audio_ind=a_ind[None], text_ids=ids[None], text_keep=np.array([text_keep]),
        motion_noisy=noisy_motion[None], motion_cond=np.asarray(motion_cond)[None],
        motion_ind=m_ind[None], rest=np.asarray(rest_motion)[None],
        joint_audio=joint_audio, joint_motion=joint_motion,
    )
    return nm.reshape(va, (la, model.cfg.audio_channels)), nm.reshape(vm, (lm, model.cfg.motion_channels))
