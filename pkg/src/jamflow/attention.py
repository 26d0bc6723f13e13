"""Joint attention across two token streams.

Each stream projects its own queries, keys, and values.  When coupling
is on for a stream, its queries attend over the pooled key/value list
[own keys; other stream's keys]; when off, over its own keys only.
Cross-stream attention is restricted by boolean masks over that pooled
axis, built here for the two asymmetric patterns:

- short-stream queries (motion) see a local window of their own tokens
  plus the proportionally mapped window of the long stream;
- long-stream queries (audio) see all of their own tokens plus exactly
  one aligned token of the short stream.

Masked positions are excluded inside the softmax, so their attention
weight is exactly zero, not merely small.
"""

import math

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor


class JointMask:
    """Boolean allow-matrix for one stream's queries over pooled keys.

    allow has shape (n_queries, n_self_keys + n_other_keys); keys are
    ordered own-stream first.  n_other == 0 means a pure self mask.
    """

    def __init__(self, allow, n_self, n_other):
        allow = np.asarray(allow, dtype=bool)
        if allow.ndim != 2 or allow.shape != (n_self, n_self + n_other):
            raise ShapeError(
                f"JointMask: allow shape {allow.shape} != ({n_self}, {n_self + n_other})"
            )
        if not allow.any(axis=1).all():
            bad = int(np.flatnonzero(~allow.any(axis=1))[0])
            raise ShapeError(f"JointMask: query {bad} has no allowed keys")
        self.allow = allow
        self.n_self = n_self
        self.n_other = n_other


def audio_query_mask(n_audio, n_motion):
    """Audio queries: all audio keys, plus the one motion key whose
    frame covers the same fraction of the clip."""
    if n_audio < 1 or n_motion < 1:
        raise ShapeError(f"audio_query_mask: lengths must be >= 1, got {n_audio}, {n_motion}")
    allow = np.zeros((n_audio, n_audio + n_motion), dtype=bool)
    allow[:, :n_audio] = True
    for i in range(n_audio):
        allow[i, n_audio + (i * n_motion) // n_audio] = True
    return JointMask(allow, n_audio, n_motion)


def motion_query_mask(n_motion, n_audio, window):
    """Motion queries: own tokens within +-window, plus the audio span
    covering the same stretch of time, edges truncated."""
    if n_motion < 1 or n_audio < 1:
        raise ShapeError(f"motion_query_mask: lengths must be >= 1, got {n_motion}, {n_audio}")
    if window < 0:
        raise ShapeError(f"motion_query_mask: window must be >= 0, got {window}")
    allow = np.zeros((n_motion, n_motion + n_audio), dtype=bool)
    for i in range(n_motion):
        lo = max(0, i - window)
        hi = min(n_motion - 1, i + window)
        allow[i, lo : hi + 1] = True
        alo = ((i - window) * n_audio) // n_motion
        ahi = -(-((i + window + 1) * n_audio) // n_motion) - 1
        alo = max(alo, 0)
        ahi = min(ahi, n_audio - 1)
        allow[i, n_motion + alo : n_motion + ahi + 1] = True
    return JointMask(allow, n_motion, n_audio)


def self_mask(n, window=None):
    """Own-stream-only mask: full, or banded to |i - j| <= window."""
    if n < 1:
        raise ShapeError(f"self_mask: length must be >= 1, got {n}")
    if window is None:
        allow = np.ones((n, n), dtype=bool)
    else:
        idx = np.arange(n)
        allow = np.abs(idx[:, None] - idx[None, :]) <= window
    return JointMask(allow, n, 0)


class AttentionParams:
    """Projection weights for one stream: fused qkv in, merged heads out."""

    def __init__(self, hidden, heads, head_dim, wq, bq, wk, bk, wv, bv, wo, bo):
        self.hidden = hidden
        self.heads = heads
        self.head_dim = head_dim
        self.wq, self.bq = wq, bq
        self.wk, self.bk = wk, bk
        self.wv, self.bv = wv, bv
        self.wo, self.bo = wo, bo

    @classmethod
    def create(cls, hidden, heads, head_dim, gen):
        inner = heads * head_dim
        def lin(n_in, n_out):
            bound = math.sqrt(6.0 / (n_in + n_out))
            w = Tensor(gen.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
            b = Tensor(np.zeros(n_out), requires_grad=True)
            return w, b
        wq, bq = lin(hidden, inner)
        wk, bk = lin(hidden, inner)
        wv, bv = lin(hidden, inner)
        wo, bo = lin(inner, hidden)
        return cls(hidden, heads, head_dim, wq, bq, wk, bk, wv, bv, wo, bo)

    def named(self, prefix):
        return {
            f"{prefix}.wq": self.wq, f"{prefix}.bq": self.bq,
            f"{prefix}.wk": self.wk, f"{prefix}.bk": self.bk,
            f"{prefix}.wv": self.wv, f"{prefix}.bv": self.bv,
            f"{prefix}.wo": self.wo, f"{prefix}.bo": self.bo,
        }


def sdpa(q, k, v, mask=None):
    """Scaled dot-product attention.

    q: (..., Lq, heads, d); k, v: (..., Lk, heads, d).  `mask` is a
    boolean (Lq, Lk) allow-matrix (or anything broadcastable to the
    score shape); a query row with every key disallowed is an error.
    """
    if q.data.ndim < 3 or q.data.ndim != k.data.ndim or k.data.shape != v.data.shape:
        raise ShapeError(
            f"sdpa: bad shapes q={q.data.shape} k={k.data.shape} v={v.data.shape}"
        )
    if q.data.shape[-1] != k.data.shape[-1] or q.data.shape[-2] != k.data.shape[-2]:
        raise ShapeError(
            f"sdpa: head layout mismatch q={q.data.shape} k={k.data.shape}"
        )
    d = q.data.shape[-1]
    nd = q.data.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    qh = nm.transpose(q, perm)  # (..., heads, Lq, d)
    kh = nm.transpose(k, perm)
    vh = nm.transpose(v, perm)
    kt = nm.transpose(kh, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = nm.scale(nm.matmul(qh, kt), 1.0 / math.sqrt(d))
    probs = nm.softmax_lastdim(scores, mask)
    out = nm.matmul(probs, vh)  # (..., heads, Lq, d)
    return nm.transpose(out, perm)


def _project_qkv(params, x, rope_table=None):
    """x: (B, L, hidden) -> q, k, v each (B, L, heads, head_dim)."""
    B, L, _ = x.data.shape
    h, d = params.heads, params.head_dim
    def prj(w, b):
        y = nm.linear(x, w, b)
        return nm.reshape(y, (B, L, h, d))
    q = prj(params.wq, params.bq)
    k = prj(params.wk, params.bk)
    v = prj(params.wv, params.bv)
    if rope_table is not None:
        from .rope import apply_rope
        q = apply_rope(q, rope_table)
        k = apply_rope(k, rope_table)
    return q, k, v


def _merge_heads(y, params):
    # y: (B, Lq, heads, d) -> (B, Lq, hidden)
    B, L, h, d = y.data.shape
    y = nm.reshape(y, (B, L, h * d))
    return nm.linear(y, params.wo, params.bo)


def _one_stream(params, q, k, v, other_kv, mask, alpha, other_q, literal_pooling):
    """Attention for one stream's queries against (optionally pooled) keys."""
    B, L, h, d = q.data.shape
    if alpha not in (0, 1):
        raise ShapeError(f"joint_attention: alpha must be 0 or 1, got {alpha}")
    if alpha == 1 and other_kv is not None:
        ko, vo = other_kv
        k = nm.concat([k, ko], axis=1)
        v = nm.concat([v, vo], axis=1)
        if literal_pooling and other_q is not None:
            q = nm.concat([q, other_q], axis=1)
    allow = None
    if mask is not None:
        if alpha == 0 and mask.n_other > 0:
            raise ShapeError(
                "joint_attention: mask covers cross-stream keys but coupling is off"
            )
        if mask.allow.shape[1] != k.data.shape[1]:
            raise ShapeError(
                f"joint_attention: mask keys {mask.allow.shape[1]} != pooled keys "
                f"{k.data.shape[1]}"
            )
        allow = mask.allow
        if q.data.shape[1] != allow.shape[0]:
            # Literal pooling carries the other stream's queries through
            # this stream's attention; they are unmasked and discarded.
            pad = np.ones((q.data.shape[1] - allow.shape[0], allow.shape[1]), dtype=bool)
            allow = np.concatenate([allow, pad], axis=0)
    y = sdpa(q, k, v, allow)  # (B, Lq_pooled, heads, d)
    if y.data.shape[1] != L:
        y = nm.narrow(y, 1, 0, L)
    return _merge_heads(y, params)


def joint_attention(
    p1, x1, p2=None, x2=None,
    rope1=None, rope2=None,
    mask1=None, mask2=None,
    alpha1=1, alpha2=1,
    literal_pooling=False,
):
    """Run both streams' attention; returns (out1, out2).

    x1, x2: (L, hidden) or (B, L, hidden) Tensors with matching batch.
    alphaN=1 pools the other stream's keys/values into stream N's key
    list; alphaN=0 keeps stream N self-contained.  maskN constrains
    stream N's queries over its (pooled) key axis.  literal_pooling
    additionally routes the other stream's queries through this
    stream's softmax and discards those rows afterwards; weights for
    surviving rows are identical either way, so this path exists for
    cross-checking, not speed.
    """
    squeeze = x1.data.ndim == 2
    if squeeze:
        x1 = nm.reshape(x1, (1,) + x1.data.shape)
        if x2 is not None:
            x2 = nm.reshape(x2, (1,) + x2.data.shape)
    if x1.data.ndim != 3:
        raise ShapeError(f"joint_attention: x1 must be (B, L, hidden), got {x1.data.shape}")
    q1, k1, v1 = _project_qkv(p1, x1, rope1)
    if x2 is None:
        if alpha1 == 1 and (mask1 is not None and mask1.n_other > 0):
            raise ShapeError("joint_attention: mask expects a second stream but none given")
        out1 = _one_stream(p1, q1, k1, v1, None, mask1, 0, None, False)
        return (nm.reshape(out1, out1.data.shape[1:]) if squeeze else out1), None
    if x2.data.ndim != 3 or x2.data.shape[0] != x1.data.shape[0]:
        raise ShapeError(
            f"joint_attention: x2 shape {x2.data.shape} incompatible with x1 {x1.data.shape}"
        )
    q2, k2, v2 = _project_qkv(p2, x2, rope2)
    out1 = _one_stream(p1, q1, k1, v1, (k2, v2) if alpha1 else None, mask1, alpha1,
                       q2 if literal_pooling else None, literal_pooling)
    out2 = _one_stream(p2, q2, k2, v2, (k1, v1) if alpha2 else None, mask2, alpha2,
                       q1 if literal_pooling else None, literal_pooling)
    if squeeze:
        out1 = nm.reshape(out1, out1.data.shape[1:])
        out2 = nm.reshape(out2, out2.data.shape[1:])
    return out1, out2


def self_attention(params, x, rope_table=None, mask=None):
    """Single-stream attention; mask, if given, must be self-only."""
    out, _ = joint_attention(params, x, None, None, rope1=rope_table, mask1=mask, alpha1=0)
    return out
