"""Dense tensors with reverse-mode automatic differentiation.

Stored values are numpy arrays; the differentiation tape is the graph
of `_prev` references that result tensors keep on their inputs, with a
backward closure per node (define-by-run).  `backward()` linearizes
that graph topologically and runs the closures in reverse, visiting
each node exactly once.  Parent tuples are ordered, never sets, so
traversal order and therefore float accumulation order is identical
run to run.

All math runs in the module default dtype (float32 for training,
switchable to float64 for gradient checking).  Mixing dtypes in one
graph is not supported; constants created inside ops inherit the dtype
of their tensor operands.
"""

import math
import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """An operation was applied to incompatibly shaped operands."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite math was required."""


_DEFAULT_DTYPE = np.float32
# Per-thread so concurrent no-grad evaluations (e.g. parallel sampling
# workers) cannot clobber each other's restore value.
_GRAD_STATE = threading.local()
_CHECKED = False


def _grad_enabled():
    return getattr(_GRAD_STATE, "enabled", True)


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def dtype_scope(dtype):
    """Temporarily switch the default dtype (e.g. float64 for grad checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    old = _grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = old


def set_checked(flag):
    """When on, every op validates its output is finite (slow)."""
    global _CHECKED
    _CHECKED = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_bw", "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._bw = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.data.shape}, not scalar")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- graph construction ------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad over the whole graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward: already called on this root; rebuild the graph")
        self._backward_done = True

        # Iterative postorder so deep graphs don't hit the recursion limit.
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._prev):
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bw is not None:
                node._bw()

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.data.dtype)


def _make(data, parents, bw, name):
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NumericError(f"{name}: non-finite values in result")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward_done = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._bw = bw
    else:
        out.requires_grad = False
        out._prev = ()
        out._bw = None
    return out


def _accum(t, g, owned=False):
    """Add g into t.grad.  owned=True promises g is a freshly allocated
    array no one else references, letting the first accumulation bind
    it without a copy."""
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
        owned = True
    if t.grad is None:
        t.grad = g if owned else g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and linear ops ---------------------------------------------


def add(a, b):
    out = _make(a.data + b.data, (a, b), None, "add")

    def bw():
        _accum(a, out.grad)
        _accum(b, out.grad)

    out._bw = bw if out.requires_grad else None
    return out


def sub(a, b):
    out = _make(a.data - b.data, (a, b), None, "sub")

    def bw():
        _accum(a, out.grad)
        _accum(b, -out.grad, owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def mul(a, b):
    out = _make(a.data * b.data, (a, b), None, "mul")

    def bw():
        _accum(a, out.grad * b.data, owned=True)
        _accum(b, out.grad * a.data, owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def scale(a, s):
    s = float(s)
    out = _make(a.data * s, (a,), None, "scale")

    def bw():
        _accum(a, out.grad * s, owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b), None, "matmul")

    def bw():
        g = out.grad
        _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)), owned=True)
        _accum(b, np.matmul(a.data.swapaxes(-1, -2), g), owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def linear(x, w, b=None):
    """x @ w + b with one tape node.

    Leading axes of x are flattened so forward and backward each run as
    a single 2-d GEMM instead of a loop over batch items.
    """
    if x.data.shape[-1] != w.data.shape[-2] or w.data.ndim != 2:
        raise ShapeError(f"linear: shapes {x.data.shape} @ {w.data.shape} incompatible")
    n_in, n_out = w.data.shape
    xshape = x.data.shape
    x2 = x.data.reshape(-1, n_in)
    y = np.matmul(x2, w.data)
    if b is not None:
        y += b.data
    out = _make(y.reshape(xshape[:-1] + (n_out,)),
                (x, w, b) if b is not None else (x, w), None, "linear")

    def bw():
        g2 = out.grad.reshape(-1, n_out)
        _accum(x, np.matmul(g2, w.data.T).reshape(xshape), owned=True)
        _accum(w, np.matmul(x2.T, g2), owned=True)
        if b is not None:
            _accum(b, g2.sum(axis=0), owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def transpose(a, axes=None):
    axes = tuple(axes) if axes else tuple(reversed(range(a.data.ndim)))
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {a.data.ndim}")
    inverse = np.argsort(axes)
    out = _make(a.data.transpose(axes), (a,), None, "transpose")

    def bw():
        _accum(a, out.grad.transpose(inverse))

    out._bw = bw if out.requires_grad else None
    return out


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    out = _make(a.data.reshape(shape), (a,), None, "reshape")

    def bw():
        _accum(a, out.grad.reshape(old))

    out._bw = bw if out.requires_grad else None
    return out


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    axis = axis if axis >= 0 else tensors[0].data.ndim + axis
    sizes = [t.data.shape[axis] for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None, "concat")

    def bw():
        start = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(start, start + size)
            _accum(t, out.grad[tuple(sl)])
            start += size

    out._bw = bw if out.requires_grad else None
    return out


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    axis = axis if axis >= 0 else a.data.ndim + axis
    if start < 0 or length < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.data.shape}"
        )
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = _make(a.data[sl].copy(), (a,), None, "narrow")

    def bw():
        g = np.zeros_like(a.data)
        g[sl] = out.grad
        _accum(a, g, owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def sum_all(a):
    out = _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), None, "sum")

    def bw():
        _accum(a, np.full(a.data.shape, out.grad, dtype=a.data.dtype), owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def mean_all(a):
    n = a.data.size
    out = _make(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), None, "mean")

    def bw():
        _accum(a, np.full(a.data.shape, out.grad / n, dtype=a.data.dtype), owned=True)

    out._bw = bw if out.requires_grad else None
    return out


# -- nonlinearities ----------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    out = _make(0.5 * x * (1.0 + th), (a,), None, "gelu")

    def bw():
        sech2 = 1.0 - th * th
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _accum(a, out.grad * (0.5 * (1.0 + th) + 0.5 * x * sech2 * dinner), owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def silu(a):
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = _make(x * sig, (a,), None, "silu")

    def bw():
        _accum(a, out.grad * (sig * (1.0 + x * (1.0 - sig))), owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def softmax_lastdim(a, mask=None):
    """Softmax over the last axis.

    `mask` is an optional boolean array broadcastable to the input's
    shape; False entries are excluded before normalization and come out
    with weight exactly 0.0.  A row with no True entry is an error, not
    a NaN.
    """
    z = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask_full = np.broadcast_to(mask, z.shape)
        if not mask_full.any(axis=-1).all():
            raise ShapeError("softmax_lastdim: a row has no allowed entries")
        z = np.where(mask_full, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _make(p, (a,), None, "softmax_lastdim")

    def bw():
        g = out.grad
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(a, p * (g - dot), owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance.  No affine
    parameters; scale and shift are applied by the caller."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    out = _make(y, (a,), None, "layer_norm")

    def bw():
        g = out.grad
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - y * gym), owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def modulated_norm(x, scl, shift, eps=1e-5):
    """layer_norm(x) * (1 + scl) + shift in one tape node.

    x: (B, L, H); scl, shift: Tensors broadcastable to x (typically
    (B, 1, H) timestep modulation).
    """
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xd - mu) * inv
    out = _make(y * (1.0 + scl.data) + shift.data, (x, scl, shift), None, "modulated_norm")

    def bw():
        g = out.grad
        _accum(shift, g)
        _accum(scl, g * y, owned=True)
        gl = g * (1.0 + scl.data)
        gm = gl.mean(axis=-1, keepdims=True)
        gym = (gl * y).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gl - gm - y * gym), owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def gated_add(x, gate, a):
    """x + gate * a in one tape node (gate broadcasts over x)."""
    out = _make(x.data + gate.data * a.data, (x, gate, a), None, "gated_add")

    def bw():
        g = out.grad
        _accum(x, g)
        _accum(gate, g * a.data, owned=True)
        _accum(a, g * gate.data, owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def rotate_pairs(x, cos, sin):
    """Rotate interleaved (even, odd) pairs of the last axis by the
    broadcast angle arrays: out_e = e*cos - o*sin, out_o = e*sin + o*cos.

    cos/sin are plain arrays broadcastable to x's pair view
    (..., last_dim // 2).
    """
    xd = x.data
    if xd.shape[-1] % 2 != 0:
        raise ShapeError(f"rotate_pairs: last dim must be even, got {xd.shape}")
    xe = xd[..., 0::2]
    xo = xd[..., 1::2]
    y = np.empty_like(xd)
    y[..., 0::2] = xe * cos - xo * sin
    y[..., 1::2] = xe * sin + xo * cos
    out = _make(y, (x,), None, "rotate_pairs")

    def bw():
        g = out.grad
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(xd)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        _accum(x, gx, owned=True)

    out._bw = bw if out.requires_grad else None
    return out


def embedding(table, ids):
    """Row lookup into `table` (V, D) by an integer array of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: ids out of range [0, {table.data.shape[0]}), got "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = _make(table.data[ids], (table,), None, "embedding")

    def bw():
        g = np.zeros_like(table.data)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.data.shape[1]))
        _accum(table, g, owned=True)

    out._bw = bw if out.requires_grad else None
    return out


# -- optimizer ----------------------------------------------------------------


class OptimizerState:
    """Adam moments plus the step counter, keyed by parameter name.

    After the first adam_step the per-name arrays in `m` and `v` become
    views into flat backing buffers (the update then runs as a handful
    of whole-buffer operations instead of thousands of tiny ones).
    Mutate loaded moments in place or assign them before the first
    step; both are how checkpoint resume uses this.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {}
        self.v = {}
        self._flat = None


def _flatten_opt(params, state, names):
    """Pack parameters and moments into flat buffers; rebind each
    parameter's data (and its moment entries) to views into them."""
    sizes = [params[n].data.size for n in names]
    total = int(np.sum(sizes)) if sizes else 0
    dt = params[names[0]].data.dtype if names else np.float64
    P = np.empty(total, dtype=dt)
    M = np.zeros(total, dtype=dt)
    V = np.zeros(total, dtype=dt)
    G = np.empty(total, dtype=dt)
    T = np.empty(total, dtype=dt)
    slices = {}
    off = 0
    for n, sz in zip(names, sizes):
        p = params[n]
        sl = slice(off, off + sz)
        P[sl] = p.data.ravel()
        m = state.m.get(n)
        if m is not None:
            if m.shape != p.data.shape:
                raise ShapeError(f"adam_step: stale moment shape for '{n}'")
            M[sl] = m.ravel()
            V[sl] = state.v[n].ravel()
        p.data = P[sl].reshape(p.data.shape)
        state.m[n] = M[sl].reshape(p.data.shape)
        state.v[n] = V[sl].reshape(p.data.shape)
        slices[n] = sl
        off += sz
    fingerprint = tuple((n, params[n].data.shape) for n in names)
    state._flat = {"P": P, "M": M, "V": V, "G": G, "T": T,
                   "slices": slices, "fingerprint": fingerprint}


def adam_step(params, grads, state):
    """One Adam update, in place on the parameter arrays.

    `params` maps name -> Tensor; `grads` maps name -> array (None means
    use each tensor's .grad; a missing/None gradient counts as zeros).
    Iteration is in sorted-name order so the update is deterministic.
    """
    names = sorted(params)
    fingerprint = tuple((n, params[n].data.shape) for n in names)
    if state._flat is None or state._flat["fingerprint"] != fingerprint:
        _flatten_opt(params, state, names)
    flat = state._flat
    G, slices = flat["G"], flat["slices"]
    for name in names:
        p = params[name]
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            G[slices[name]] = 0.0
            continue
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{p.data.shape} for '{name}'"
            )
        G[slices[name]] = g.ravel()
    if not np.isfinite(G).all():
        for name in names:
            if not np.isfinite(G[slices[name]]).all():
                raise NumericError(f"adam_step: non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    # In-place whole-buffer update (G is consumed; T is scratch):
    # m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g²;
    # p -= (lr/bc1) · m / (sqrt(v/bc2) + eps)
    M, V, P, T = flat["M"], flat["V"], flat["P"], flat["T"]
    np.multiply(G, G, out=T)
    V *= state.beta2
    T *= 1.0 - state.beta2
    V += T
    M *= state.beta1
    G *= 1.0 - state.beta1
    M += G
    np.divide(V, bc2, out=T)
    np.sqrt(T, out=T)
    T += state.eps
    np.divide(M, T, out=T)
    T *= state.lr / bc1
    P -= T


def global_grad_norm(params):
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            gr = g.ravel()
            total += float(np.multiply(gr, gr).sum(dtype=np.float64))
    return math.sqrt(total)


def zero_grads(params):
    for p in params.values():
        p.grad = None
