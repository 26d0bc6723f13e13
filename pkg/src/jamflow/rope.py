"""Rotary position embeddings with sequence-length rescaling.

Two streams of different lengths L and L_ref cover the same time span,
so positions are rescaled before rotation: position p in a stream of
length L rotates by angle (p * L_ref / L) * theta_d, where L_ref is the
longer stream's length and theta_d = base**(-2d / head_dim) for pair
index d.  Both streams then agree on angle per unit time, and the
stream with L == L_ref reduces to standard rotary embeddings.

Angles are computed in float64 with the integer product p * L_ref
formed first, so the division is correctly rounded and positions that
land on exact binary fractions (the usual case for power-of-two
lengths) match across streams bit for bit.
"""

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor


class RopeTable:
    """Precomputed cos/sin per (position, pair), shaped for head
    broadcasting on (..., L, heads, head_dim // 2): (length, 1, half)."""

    def __init__(self, length, ref_length, head_dim, base=10000.0):
        if head_dim % 2 != 0:
            raise ShapeError(f"rope: head_dim must be even, got {head_dim}")
        if length < 1 or ref_length < 1:
            raise ShapeError(f"rope: lengths must be >= 1, got {length}, {ref_length}")
        if ref_length < length:
            raise ShapeError(f"rope: ref_length {ref_length} shorter than length {length}")
        self.length = length
        self.ref_length = ref_length
        self.head_dim = head_dim
        self.base = base
        half = head_dim // 2
        theta = np.float64(base) ** (-2.0 * np.arange(half) / head_dim)
        pos = np.array([float(p * ref_length) / length for p in range(length)], dtype=np.float64)
        ang = pos[:, None] * theta[None, :]
        dt = nm.default_dtype()
        self._angles = ang
        self.cos = np.cos(ang).reshape(length, 1, half).astype(dt)
        self.sin = np.sin(ang).reshape(length, 1, half).astype(dt)

    def angles(self):
        """Raw float64 angles, (length, head_dim // 2)."""
        return self._angles


def apply_rope(x, table):
    """Rotate per-head vectors by position.

    x: Tensor (..., L, heads, head_dim), pairs interleaved as
    (2d, 2d+1).  Returns a Tensor of the same shape.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    shape = x.data.shape
    if len(shape) < 3:
        raise ShapeError(f"apply_rope: need (..., L, heads, head_dim), got {shape}")
    L, h, d = shape[-3], shape[-2], shape[-1]
    if L != table.length:
        raise ShapeError(f"apply_rope: sequence length {L} != table length {table.length}")
    if d != table.head_dim:
        raise ShapeError(f"apply_rope: head_dim {d} != table head_dim {table.head_dim}")
    return nm.rotate_pairs(x, table.cos, table.sin)
