"""Dense float32 tensors with reverse-mode differentiation.

Small, auditable engine: every op checks its inputs, produces finite
outputs or raises, and carries an explicit backward closure. Broadcasting
is deliberately restricted (same shape, scalar, per-row bias, per-row
scale/column) so each gradient is a few lines.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

__all__ = [
    "DiffcoreError",
    "ShapeError",
    "NonFiniteError",
    "DegenerateInputError",
    "RngState",
    "Tensor",
    "add",
    "add_col",
    "concat",
    "div",
    "entropy",
    "exp",
    "gather_cols",
    "gather_rows",
    "gelu",
    "index_add",
    "l2_normalize",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "normal_cdf",
    "relu",
    "reshape",
    "scale_rows",
    "softmax",
    "sub",
    "tsum",
    "topk",
    "transpose",
]


class DiffcoreError(Exception):
    pass


class ShapeError(DiffcoreError):
    pass


class NonFiniteError(DiffcoreError):
    pass


class DegenerateInputError(DiffcoreError):
    pass


class RngState:
    """Deterministic PCG64 stream; equal seeds give identical draws."""

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self.algorithm = "pcg64"
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def stream(self, stream_id: int) -> "RngState":
        """Independent child stream; parallel-safe across stream ids.

        Nested calls extend the spawn key, so distinct stream paths never
        collide.
        """
        key = self._seq.spawn_key + (int(stream_id),)
        return RngState(self.seed, _seq=np.random.SeedSequence(self.seed, spawn_key=key))

    def normal(self, shape, sigma=1.0):
        return (self._gen.standard_normal(size=shape) * sigma).astype(np.float32)

    def uniform(self, shape):
        return self._gen.random(size=shape).astype(np.float32)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n, p=None):
        return int(self._gen.choice(n, p=p))

    def permutation(self, n):
        return self._gen.permutation(n)


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_f32(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # light operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def _accum(parent: Tensor, grad: np.ndarray):
    if not (parent.requires_grad or parent._parents):
        return
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.data)
    parent.grad += grad.astype(np.float32)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    data = np.asarray(data, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    rg = any(p.requires_grad or p._parents for p in parents)
    return Tensor(data, requires_grad=rg, _parents=parents, _backward=backward if rg else None)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or batched product for matching 3-D stacks."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
        out = a.data @ b.data

        def bwd(g):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batched dims {a.shape} x {b.shape}")
        out = np.matmul(a.data, b.data)

        def bwd(g):
            _accum(a, np.matmul(g, b.data.transpose(0, 2, 1)))
            _accum(b, np.matmul(a.data.transpose(0, 2, 1), g))

    else:
        raise ShapeError(f"matmul: unsupported ranks {a.ndim}, {b.ndim}")
    return _make(out, (a, b), bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _coerce(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = _coerce(x)
    old = x.shape

    def bwd(g):
        _accum(x, g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bwd)


def concat(xs, axis=0) -> Tensor:
    xs = [_coerce(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        for x, s, e in zip(xs, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(s, e)
            _accum(x, g[tuple(sl)])

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bwd)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; `b` may also be a bias vector over the last axis."""
    a, b = _coerce(a), _coerce(b)
    if a.shape == b.shape:
        def bwd(g):
            _accum(a, g)
            _accum(b, g)
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bwd(g):
            _accum(a, g)
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
    elif b.ndim == 0:
        def bwd(g):
            _accum(a, g)
            _accum(b, np.asarray(g.sum(), dtype=np.float32))
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape}, {b.shape}")
    return _make(a.data + b.data, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    x = _coerce(x)

    def bwd(g):
        _accum(x, -g)

    return _make(-x.data, (x,), bwd)


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(_coerce(b)))


def add_col(x: Tensor, col: Tensor) -> Tensor:
    """Add a per-row value: x[i, j] + col[i] for 2-D x, 1-D col."""
    x, col = _coerce(x), _coerce(col)
    if x.ndim != 2 or col.ndim != 1 or x.shape[0] != col.shape[0]:
        raise ShapeError(f"add_col: {x.shape}, {col.shape}")

    def bwd(g):
        _accum(x, g)
        _accum(col, g.sum(axis=1))

    return _make(x.data + col.data[:, None], (x, col), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a python scalar or 0-d tensor."""
    if isinstance(b, (int, float)):
        a = _coerce(a)
        c = float(b)

        def bwd(g):
            _accum(a, g * c)

        return _make(a.data * np.float32(c), (a,), bwd)
    a, b = _coerce(a), _coerce(b)
    if a.shape == b.shape:
        def bwd(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)
    elif b.ndim == 0:
        def bwd(g):
            _accum(a, g * b.data)
            _accum(b, np.asarray((g * a.data).sum(), dtype=np.float32))
    else:
        raise ShapeError(f"mul: incompatible shapes {a.shape}, {b.shape}")
    return _make(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise or scalar-denominator division."""
    a, b = _coerce(a), _coerce(b)
    if not (a.shape == b.shape or b.ndim == 0):
        raise ShapeError(f"div: incompatible shapes {a.shape}, {b.shape}")

    def bwd(g):
        _accum(a, g / b.data)
        gb = -g * a.data / (b.data * b.data)
        _accum(b, np.asarray(gb.sum(), dtype=np.float32) if b.ndim == 0 else gb)

    return _make(a.data / b.data, (a, b), bwd)


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Row-wise scaling: out[i] = w[i] * x[i]."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 2 or w.ndim != 1 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"scale_rows: {x.shape}, {w.shape}")

    def bwd(g):
        _accum(x, g * w.data[:, None])
        _accum(w, (g * x.data).sum(axis=1))

    return _make(x.data * w.data[:, None], (x, w), bwd)


def relu(x: Tensor) -> Tensor:
    x = _coerce(x)
    mask = x.data > 0

    def bwd(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bwd)


_SQRT2 = np.float32(np.sqrt(2.0))
_INV_SQRT_2PI = np.float32(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _coerce(x)
    cdf = _sp.ndtr(x.data.astype(np.float64)).astype(np.float32)
    pdf = (np.exp(-0.5 * x.data.astype(np.float64) ** 2) * float(_INV_SQRT_2PI)).astype(np.float32)

    def bwd(g):
        _accum(x, g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    x = _coerce(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def bwd(g):
        _accum(x, g * out)

    return _make(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    x = _coerce(x)
    if np.any(x.data <= 0):
        raise DegenerateInputError("log: non-positive input")

    def bwd(g):
        _accum(x, g / x.data)

    return _make(np.log(x.data), (x,), bwd)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)

    def bwd(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge, x.shape).copy())

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)
    if axis is None:
        n = x.data.size
    else:
        n = x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; rows sum to one."""
    x = _coerce(x)
    if x.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _coerce(x)
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax: empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bwd(g):
        _accum(x, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bwd)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Project onto the unit sphere along `axis`; zero vectors are rejected."""
    x = _coerce(x)
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm < 1e-12):
        raise DegenerateInputError("l2_normalize: zero-norm input")
    norm = norm.astype(np.float32)
    out = x.data / norm

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, (g - out * dot) / norm)

    return _make(out, (x,), bwd)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows (axis 0) by an integer index array."""
    x = _coerce(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _make(x.data[idx], (x,), bwd)


def gather_cols(x: Tensor, idx) -> Tensor:
    """out[i, j] = x[i, idx[i, j]] for 2-D x and integer idx."""
    x = _coerce(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_cols: {x.shape}, {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        _accum(x, gx)

    return _make(x.data[rows, idx], (x,), bwd)


def index_add(n_rows: int, idx, src: Tensor) -> Tensor:
    """Scatter-add rows of `src` into a zero (n_rows, d) buffer at `idx`."""
    src = _coerce(src)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=np.float32)
    np.add.at(out, idx, src.data)

    def bwd(g):
        _accum(src, g[idx])

    return _make(out, (src,), bwd)


def entropy(p: Tensor, axis: int = -1) -> Tensor:
    """Shannon entropy in nats of probability vectors; 0*log(0) := 0."""
    p = _coerce(p)
    safe = np.maximum(p.data, 1e-12)
    logp = np.log(safe)
    out = -(p.data * logp).sum(axis=axis)

    def bwd(g):
        _accum(p, -np.expand_dims(g, axis) * (logp + 1.0))

    return _make(out, (p,), bwd)


def normal_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF (Phi); gradient is the normal pdf."""
    x = _coerce(x)
    out = _sp.ndtr(x.data.astype(np.float64)).astype(np.float32)
    pdf = (np.exp(-0.5 * x.data.astype(np.float64) ** 2) * float(_INV_SQRT_2PI)).astype(np.float32)

    def bwd(g):
        _accum(x, g * pdf)

    return _make(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learnable gain/bias."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm: gain/bias must match last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = y * gain.data + bias.data

    def bwd(g):
        flat_g = g.reshape(-1, d)
        flat_y = y.reshape(-1, d)
        _accum(gain, (flat_g * flat_y).sum(axis=0))
        _accum(bias, flat_g.sum(axis=0))
        dy = g * gain.data
        m1 = dy.mean(axis=-1, keepdims=True)
        m2 = (dy * y).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dy - m1 - y * m2))

    return _make(out, (x, gain, bias), bwd)


def topk(x, k: int):
    """Top-k along the last axis, values descending, ties to lowest index.

    Non-differentiable; accepts a Tensor or array and returns numpy
    (indices, values).
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    n = data.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"topk: k={k} out of range for axis size {n}")
    order = np.argsort(-data, axis=-1, kind="stable")
    idx = order[..., :k]
    vals = np.take_along_axis(data, idx, axis=-1)
    return idx, vals
