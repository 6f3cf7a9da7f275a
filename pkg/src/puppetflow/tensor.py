"""Dense tensors with reverse-mode differentiation.

Storage is a row-major numpy array in one of two precisions: float64 ("wide",
used for gradient checks and oracles) and float32 ("narrow", used for
training). Ops never broadcast except for the trailing-dim vector special
case in `add`/`mul` (bias / channel gain); every other shape mismatch raises
ShapeError naming both shapes. Tensors are value-semantic; the gradient graph
is confined to the thread that built it.
"""

from __future__ import annotations

import itertools
import struct
from contextlib import contextmanager

import numpy as np

WIDE = np.float64
NARROW = np.float32

# Additive mask value for attention logits. exp(x) underflows to exactly 0.0
# for x <= -746 in float64, so masked keys get weight 0.0 bit-exactly.
MASK_FILL = -1.0e9


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ConfigError(ValueError):
    """A structural parameter (kernel size, stride, probability...) is invalid."""


class ConditioningError(ValueError):
    """A conditioning structure is malformed (e.g. a fully masked attention row)."""


class AlignmentError(ValueError):
    """Two sequences that must share a timeline do not."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where finiteness is guaranteed."""


_ids = itertools.count()
_grad_enabled = True
_finite_checks = False


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_checks():
    """Validate every op output for NaN/Inf inside the block."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = True
    try:
        yield
    finally:
        _finite_checks = prev


class Tensor:
    """A rank-N real array, optionally participating in the gradient tape.

    `grad` mirrors `data`'s shape once backward has run. Graph nodes record
    their parents and a backward closure; `backward` replays nodes in reverse
    construction order, which is a valid topological order because every op
    is constructed after its inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_op", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None, _op="leaf"):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=NARROW)
        if data.dtype not in (WIDE, NARROW):
            raise ConfigError(f"unsupported dtype {data.dtype}; use float32 or float64")
        self.data = np.ascontiguousarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd
        self._op = _op
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False, _op="detach")

    def astype(self, dtype):
        """Precision cast. Not differentiable; use at graph boundaries only."""
        return Tensor(self.data.astype(dtype), requires_grad=False, _op="astype")

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse-mode pass seeded at this tensor.

        Visits each reachable graph node exactly once, in reverse construction
        order; accumulation into shared inputs is additive.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"implicit backward seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._bwd is not None:
                nodes.append(node)
                stack.extend(node._parents)
        nodes.sort(key=lambda n: n._id, reverse=True)
        self.accumulate_grad(grad)
        for node in nodes:
            node._bwd(node.grad)

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=NARROW, requires_grad=False):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=NARROW, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=NARROW, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def randn(rng, shape, dtype=NARROW, scale=1.0, requires_grad=False):
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=requires_grad)


def _tracking(*ts):
    return _grad_enabled and any(t.requires_grad for t in ts)


def _make(data, parents, bwd, op):
    if _finite_checks and not np.isfinite(data).all():
        raise NumericalError(f"non-finite output of op '{op}'")
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _bwd=bwd, _op=op)


def _same_dtype(op, *ts):
    d = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d:
            raise ConfigError(f"{op}: mixed precisions {d} and {t.data.dtype}")
    return d


def _trailing_ok(a, b):
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]


def _sum_to_trailing(g, n):
    return g.reshape(-1, n).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may also be a trailing-dim vector (bias)."""
    _same_dtype("add", a, b)
    if a.shape != b.shape and not _trailing_ok(a, b):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g if b.shape == a.shape else _sum_to_trailing(g, b.shape[0]))

    return _make(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("sub", a, b)
    if a.shape != b.shape and not _trailing_ok(a, b):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-(g if b.shape == a.shape else _sum_to_trailing(g, b.shape[0])))

    return _make(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; `b` may also be a trailing-dim vector (gain/gate)."""
    _same_dtype("mul", a, b)
    if a.shape != b.shape and not _trailing_ok(a, b):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            b.accumulate_grad(gb if b.shape == a.shape else _sum_to_trailing(gb, b.shape[0]))

    return _make(out, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(-g)

    return _make(-a.data, (a,), bwd, "neg")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def bwd(g):
        a.accumulate_grad(g * s)

    return _make(a.data * s, (a,), bwd, "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        a.accumulate_grad(g)

    return _make(a.data + a.data.dtype.type(s), (a,), bwd, "add_scalar")


def add_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Add a constant array (not a graph node). Used for additive masks."""
    if arr.shape != a.shape:
        raise ShapeError(f"add_const: shapes {a.shape} and {arr.shape} differ")

    def bwd(g):
        a.accumulate_grad(g)

    return _make(a.data + arr.astype(a.data.dtype), (a,), bwd, "add_const")


def mul_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array (loss masks, region weights)."""
    if arr.shape != a.shape and not (arr.ndim == 1 and a.shape[-1] == arr.shape[0]):
        raise ShapeError(f"mul_const: shapes {a.shape} and {arr.shape} differ")
    c = arr.astype(a.data.dtype)

    def bwd(g):
        a.accumulate_grad(g * c)

    return _make(a.data * c, (a,), bwd, "mul_const")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, 2D or stacked 3D with identical leading dim."""
    _same_dtype("matmul", a, b)
    if a.ndim == b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims disagree for {a.shape} x {b.shape}")
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: stacked shapes {a.shape} x {b.shape} incompatible")
    else:
        raise ShapeError(f"matmul: ranks {a.shape} x {b.shape} unsupported")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            b.accumulate_grad(np.matmul(a.data.swapaxes(-1, -2), g))

    return _make(out, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ bias). x is [..., D_in] flattened to 2D internally."""
    lead = x.shape[:-1]
    x2 = reshape(x, (-1, x.shape[-1]))
    y = matmul(x2, w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def bwd(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _make(out, (a,), bwd, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        a.accumulate_grad(g.transpose(inv))

    return _make(out, (a,), bwd, "transpose")


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    _same_dtype("concat", *parts)
    ref = list(parts[0].shape)
    for p in parts[1:]:
        s = list(p.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"concat: shape {tuple(p.shape)} incompatible with {tuple(ref)} on axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bwd(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p.accumulate_grad(gp)

    return _make(out, tuple(parts), bwd, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a.accumulate_grad(full)

    return _make(out, (a,), bwd, "slice")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, g))

    return _make(out, (a,), bwd, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, g / n))

    return _make(out, (a,), bwd, "mean")


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _make(out, (a,), bwd, "sum_axis")


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = a.shape[axis]
    return scale(sum_axis(a, axis, keepdims), 1.0 / n)


def _sigmoid_np(x):
    # exp overflow for very negative x saturates to 0.0, which is exact
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)

    def bwd(g):
        a.accumulate_grad(g * out * (1.0 - out))

    return _make(out, (a,), bwd, "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    out = a.data * s

    def bwd(g):
        a.accumulate_grad(g * s * (1.0 + a.data * (1.0 - s)))

    return _make(out, (a,), bwd, "silu")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        a.accumulate_grad(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du))

    return _make(out.astype(x.dtype), (a,), bwd, "gelu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        a.accumulate_grad(g * (1.0 - out**2))

    return _make(out, (a,), bwd, "tanh")


def powc(a: Tensor, p: float) -> Tensor:
    """Elementwise power with constant exponent. Caller guarantees domain."""
    with np.errstate(over="ignore"):
        out = a.data**p

    def bwd(g):
        a.accumulate_grad(g * p * a.data ** (p - 1.0))

    return _make(out.astype(a.data.dtype), (a,), bwd, "powc")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out * (g - dot))

    return _make(out, (a,), bwd, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned gain/bias."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: params {gamma.shape}/{beta.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad(_sum_to_trailing(g * xhat, d))
        if beta.requires_grad:
            beta.accumulate_grad(_sum_to_trailing(g, d))
        if x.requires_grad:
            gh = g * gamma.data
            t1 = gh.sum(axis=-1, keepdims=True)
            t2 = (gh * xhat).sum(axis=-1, keepdims=True)
            x.accumulate_grad(inv / d * (d * gh - t1 - xhat * t2))

    return _make(out, (x, gamma, beta), bwd, "layer_norm")


def modulate(x: Tensor, shift: Tensor, scl: Tensor) -> Tensor:
    """Adaptive modulation x * (1 + scale) + shift with per-channel vectors."""
    return add(mul(x, add_scalar(scl, 1.0)), shift)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v with an optional boolean keep-mask [Lq, Lk].

    Masked logits get a -1e9 additive term; a fully masked query row is a
    conditioning bug and raises before any arithmetic runs.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention: expected 2D q/k/v, got {q.shape}/{k.shape}/{v.shape}")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: shapes {q.shape}/{k.shape}/{v.shape} inconsistent")
    logits = scale(matmul(q, transpose(k, (1, 0))), 1.0 / float(np.sqrt(q.shape[1])))
    if mask is not None:
        if mask.shape != (q.shape[0], k.shape[0]):
            raise ShapeError(f"attention: mask {mask.shape} does not match [{q.shape[0]}, {k.shape[0]}]")
        if not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise ConditioningError(f"attention: query row {bad} has no allowed keys")
        logits = add_const(logits, np.where(mask, 0.0, MASK_FILL))
    return matmul(softmax(logits, axis=-1), v)


def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-stochastic attention matrix, for inspection in tests."""
    logits = q.data @ k.data.T / np.sqrt(q.shape[1])
    if mask is not None:
        logits = logits + np.where(mask, 0.0, MASK_FILL)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# convolutions


def _im2col(xp, n, ci, ho, wo, kh, kw, stride):
    sN, sC, sH, sW = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, ci, ho, wo, kh, kw), (sN, sC, sH * stride, sW * stride, sH, sW)
    )
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, ci * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution, x [N,Ci,H,W], w [Co,Ci,K,K].

    The im2col buffer is rebuilt in backward instead of being saved; at face
    and VAE batch sizes it is far larger than the activations themselves.
    """
    if stride <= 0:
        raise ConfigError(f"conv2d: stride must be positive, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} incompatible")
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, n, ci, ho, wo, kh, kw, stride)
    wf = w.data.reshape(co, -1)
    out = (cols @ wf.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data.reshape(1, co, 1, 1)
    del cols

    def bwd(g):
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        if b is not None and b.requires_grad:
            b.accumulate_grad(gf.sum(axis=0))
        if w.requires_grad:
            xpb = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
            cols_b = _im2col(xpb, n, ci, ho, wo, kh, kw, stride)
            w.accumulate_grad((gf.T @ cols_b).reshape(w.shape))
        if x.requires_grad:
            gcols = (gf @ wf).reshape(n, ho, wo, ci, kh, kw)
            gxp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            for ky in range(kh):
                for kx in range(kw):
                    gxp[:, :, ky : ky + ho * stride : stride, kx : kx + wo * stride : stride] += (
                        gcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
                    )
            x.accumulate_grad(gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of [N,C,H,W]."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        x.accumulate_grad(g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(out, (x,), bwd, "upsample2x")


def causal_conv1d(x: Tensor, kernel: Tensor, stride: int, taps=None) -> Tensor:
    """1D causal convolution: x [Ci,T], kernel [Co,Ci,K] -> [Co, ceil(T/stride)].

    Left padding of K-1 zeros only, so output index t depends only on
    x[:, : t*stride + 1]. `taps` overrides the output sample positions
    (still causal: the window for tap p covers input [p-K+1, p]).
    """
    if kernel.ndim != 3 or x.ndim != 2:
        raise ShapeError(f"causal_conv1d: shapes {x.shape} and {kernel.shape} unsupported")
    co, ci, kk = kernel.shape
    if kk <= 0:
        raise ConfigError(f"causal_conv1d: kernel size must be positive, got {kk}")
    if stride <= 0:
        raise ConfigError(f"causal_conv1d: stride must be positive, got {stride}")
    if x.shape[0] != ci:
        raise ShapeError(f"causal_conv1d: input channels {x.shape[0]} != kernel channels {ci}")
    t_in = x.shape[1]
    if taps is None:
        taps = [t * stride for t in range(-(-t_in // stride))]
    taps = list(taps)
    if any(p < 0 or p >= t_in for p in taps):
        raise ShapeError(f"causal_conv1d: tap positions {taps} outside [0, {t_in})")
    xp = np.concatenate([np.zeros((ci, kk - 1), dtype=x.data.dtype), x.data], axis=1)
    # windows[j] = padded input columns [taps[j], taps[j]+K), i.e. raw [taps[j]-K+1, taps[j]]
    win = np.stack([xp[:, p : p + kk] for p in taps])  # [T_out, Ci, K]
    wf = kernel.data.reshape(co, ci * kk)
    out = (win.reshape(len(taps), ci * kk) @ wf.T).T  # [Co, T_out]
    out = np.ascontiguousarray(out)

    def bwd(g):
        gt = g.T  # [T_out, Co]
        if kernel.requires_grad:
            kernel.accumulate_grad((gt.T @ win.reshape(len(taps), ci * kk)).reshape(kernel.shape))
        if x.requires_grad:
            gwin = (gt @ wf).reshape(len(taps), ci, kk)
            gxp = np.zeros_like(xp)
            for j, p in enumerate(taps):
                gxp[:, p : p + kk] += gwin[j]
            x.accumulate_grad(gxp[:, kk - 1 :])

    return _make(out, (x, kernel), bwd, "causal_conv1d")


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """[N, D] -> [N*k, D], each row repeated k times (temporal pos-emb expansion)."""
    out = np.repeat(a.data, k, axis=0)

    def bwd(g):
        a.accumulate_grad(g.reshape(a.shape[0], k, a.shape[1]).sum(axis=1))

    return _make(out, (a,), bwd, "repeat_rows")


def tile_rows(a: Tensor, k: int) -> Tensor:
    """[N, D] -> [k*N, D], whole block tiled k times (spatial pos-emb expansion)."""
    out = np.tile(a.data, (k, 1))

    def bwd(g):
        a.accumulate_grad(g.reshape(k, a.shape[0], a.shape[1]).sum(axis=0))

    return _make(out, (a,), bwd, "tile_rows")


# ---------------------------------------------------------------------------
# patchify


def _check_patch(dims, patch):
    c, t, h, w = dims
    pt, ph, pw = patch
    if t % pt or h % ph or w % pw:
        raise ShapeError(f"patchify: dims {dims} not divisible by patch {patch}")


def patchify(latent: Tensor, patch) -> Tensor:
    """[C,T,H,W] -> [T/pt * H/ph * W/pw, C*pt*ph*pw], token order (t,h,w)."""
    _check_patch(latent.shape, patch)
    c, t, h, w = latent.shape
    pt, ph, pw = patch
    x = reshape(latent, (c, t // pt, pt, h // ph, ph, w // pw, pw))
    x = transpose(x, (1, 3, 5, 0, 2, 4, 6))
    return reshape(x, ((t // pt) * (h // ph) * (w // pw), c * pt * ph * pw))


def unpatchify(tokens: Tensor, dims, patch) -> Tensor:
    """Exact inverse of `patchify` for the given dims."""
    _check_patch(dims, patch)
    c, t, h, w = dims
    pt, ph, pw = patch
    x = reshape(tokens, (t // pt, h // ph, w // pw, c, pt, ph, pw))
    x = transpose(x, (3, 0, 4, 1, 5, 2, 6))
    return reshape(x, (c, t, h, w))


# ---------------------------------------------------------------------------
# serialization: "WANT" dump, bit-exact float32 row-major

_MAGIC = b"WANT"
_VERSION = 1


def dump_tensor(path, t: Tensor | np.ndarray) -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    arr = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def load_tensor(path, dtype=NARROW, requires_grad=False) -> Tensor:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ConfigError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ConfigError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{rank}Q", raw, 12)
    n = int(np.prod(dims)) if rank else 1
    off = 12 + 8 * rank
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
    return Tensor(data.astype(dtype), requires_grad=requires_grad)
