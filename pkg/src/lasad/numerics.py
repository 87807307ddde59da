"""Dense float64 tensors with tape-based reverse-mode autodiff.

This is the complete primitive set the attention scans and the token-grid
model are built from: elementwise arithmetic and activations, 2-D and
batched matrix products, row softmax, RMS normalization, embedding
lookup, mean cross-entropy, rotary phases, and the gated decay scan.
Every primitive validates shapes, checks its output for NaN/Inf (a
non-finite value raises instead of propagating), and registers a
backward rule on the active tape when gradients are being tracked.

Storage is always row-major contiguous float64. Elementwise ops accept
equal shapes or a Python scalar on either side; there is no general
broadcasting. The tape is freed after each ``backward`` call, so one
forward/backward pair per recorded graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DomainError,
    InputError,
    NonFiniteError,
    ShapeError,
    UsageError,
)

__all__ = [
    "Tensor",
    "Graph",
    "no_grad",
    "tensor",
    "zeros",
    "ones",
    "full",
    "randn",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sigmoid",
    "silu",
    "elu1",
    "exp",
    "log",
    "clamp",
    "add_bias",
    "matmul",
    "bmm",
    "reshape",
    "permute",
    "concat",
    "gather_rows",
    "softmax_rows",
    "rms_norm",
    "cross_entropy_mean",
    "rope",
    "decay_scan",
    "decay_scan_forward",
    "sum_all",
    "mean_all",
    "backward",
    "grad_enabled",
]


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    ``data`` is the backing numpy array (row-major, contiguous).
    ``grad`` is filled by :func:`backward` for every tensor that took
    part in a tracked computation; gradients accumulate across backward
    calls until reset by the caller.
    """

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the underlying array."""
        return self.data.copy()

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        if self.size <= 8:
            return f"Tensor({self.data.tolist()}{flag})"
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    op: str
    out: Tensor
    backward: object  # callable(gradient ndarray) -> None


@dataclass
class Graph:
    """The autodiff tape: an ordered record of primitive applications.

    Nodes are appended in execution order, which is a topological order
    of the dynamic graph by construction. ``backward`` walks the record
    once in reverse; the tape is cleared afterwards.
    """

    nodes: list = field(default_factory=list)
    enabled: bool = True
    visits: int = 0  # nodes applied by the most recent backward pass


_GRAPH = Graph()


def grad_enabled() -> bool:
    return _GRAPH.enabled


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _GRAPH.enabled
        _GRAPH.enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAPH.enabled = self._prev
        return False


def _tracking(*tensors) -> bool:
    if not _GRAPH.enabled:
        return False
    return any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def _record(op: str, out: Tensor, backward_fn) -> None:
    out.requires_grad = True
    _GRAPH.nodes.append(_Node(op, out, backward_fn))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss; fills grads of tracked tensors.

    Frees the tape when done. Raises :class:`UsageError` if the loss is
    not a scalar or was never part of a tracked computation.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward on a tensor that is not part of a tracked graph")
    loss.grad = np.ones_like(loss.data)
    _GRAPH.visits = 0
    try:
        for node in reversed(_GRAPH.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)
            _GRAPH.visits += 1
    finally:
        _GRAPH.nodes.clear()


# ---------------------------------------------------------------------------
# constructors

def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=requires_grad)


def randn(shape, rng: np.random.Generator, std: float = 0.02, requires_grad: bool = False) -> Tensor:
    """Normal(0, std) initializer; a seeded generator is mandatory."""
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise ops (equal shapes or a Python scalar on one side)

def _binary(op, a, b, fwd, bw_a, bw_b):
    a_scalar = not isinstance(a, Tensor)
    b_scalar = not isinstance(b, Tensor)
    if a_scalar and b_scalar:
        raise UsageError(f"{op} needs at least one Tensor operand")
    if a_scalar:
        a = float(a)
    if b_scalar:
        b = float(b)
    if not a_scalar and not b_scalar and a.shape != b.shape:
        raise ShapeError(f"{op} operand shapes differ: {a.shape} vs {b.shape}")
    av = a if a_scalar else a.data
    bv = b if b_scalar else b.data
    out = Tensor(fwd(av, bv))
    _check_finite(op, out.data)
    if _tracking(a, b):
        def backward_fn(g):
            if not a_scalar:
                _accumulate(a, bw_a(g, av, bv))
            if not b_scalar:
                _accumulate(b, bw_b(g, av, bv))
        _record(op, out, backward_fn)
    return out


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    if _tracking(a):
        def backward_fn(g):
            _accumulate(a, -g)
        _record("neg", out, backward_fn)
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar."""
    return mul(a, float(factor))


def _unary(op, a, fwd, bw):
    a = _as_tensor(a)
    out_data, saved = fwd(a.data)
    out = Tensor(out_data)
    _check_finite(op, out.data)
    if _tracking(a):
        def backward_fn(g):
            _accumulate(a, bw(g, a.data, out.data, saved))
        _record(op, out, backward_fn)
    return out


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", a,
                  lambda x: (_sigmoid_stable(x), None),
                  lambda g, x, y, s: g * y * (1.0 - y))


def silu(a) -> Tensor:
    def fwd(x):
        s = _sigmoid_stable(x)
        return x * s, s

    return _unary("silu", a, fwd,
                  lambda g, x, y, s: g * (s + x * s * (1.0 - s)))


def elu1(a) -> Tensor:
    """elu(x) + 1: a smooth positive feature map for kernelized attention."""
    def fwd(x):
        return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0))), None

    return _unary("elu1", a, fwd,
                  lambda g, x, y, s: g * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0))))


def exp(a) -> Tensor:
    return _unary("exp", a,
                  lambda x: (np.exp(x), None),
                  lambda g, x, y, s: g * y)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _unary("log", a,
                  lambda x: (np.log(x), None),
                  lambda g, x, y, s: g / x)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; the gradient passes through inside the bounds."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    if _tracking(a):
        mask = (a.data >= lo) & (a.data <= hi)

        def backward_fn(g):
            _accumulate(a, g * mask)
        _record("clamp", out, backward_fn)
    return out


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-d vector to every row of a (..., d) tensor."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if bias.ndim != 1 or a.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias shapes {a.shape} and {bias.shape} are incompatible")
    out = Tensor(a.data + bias.data)
    _check_finite("add_bias", out.data)
    if _tracking(a, bias):
        def backward_fn(g):
            _accumulate(a, g)
            _accumulate(bias, g.reshape(-1, bias.shape[0]).sum(axis=0))
        _record("add_bias", out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# matrix products and layout

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    _check_finite("matmul", out.data)
    if _tracking(a, b):
        def backward_fn(g):
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        _record("matmul", out, backward_fn)
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"bmm needs equal-rank stacked matrices, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm shapes disagree: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    _check_finite("bmm", out.data)
    if _tracking(a, b):
        def backward_fn(g):
            if a.requires_grad:
                _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
            if b.requires_grad:
                _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))
        _record("bmm", out, backward_fn)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = Tensor(a.data.reshape(shape))
    if _tracking(a):
        def backward_fn(g):
            _accumulate(a, g.reshape(a.shape))
        _record("reshape", out, backward_fn)
    return out


def permute(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    if _tracking(a):
        inverse = tuple(np.argsort(axes))

        def backward_fn(g):
            _accumulate(a, np.ascontiguousarray(np.transpose(g, inverse)))
        _record("permute", out, backward_fn)
    return out


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    if _tracking(a, b):
        split = a.shape[axis]

        def backward_fn(g):
            ga, gb = np.split(g, [split], axis=axis)
            _accumulate(a, ga)
            _accumulate(b, gb)
        _record("concat", out, backward_fn)
    return out


def gather_rows(table: Tensor, idx) -> Tensor:
    """Row lookup (embedding): out[i] = table[idx[i]]."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a 1-D index, got shape {idx.shape}")
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InputError(
            f"gather_rows index out of range [0, {table.shape[0]}): "
            f"min={idx.min()} max={idx.max()}")
    out = Tensor(table.data[idx])
    if _tracking(table):
        def backward_fn(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accumulate(table, gt)
        _record("gather_rows", out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# normalizations and losses

def softmax_rows(a, causal: bool = False) -> Tensor:
    """Row softmax over the last axis, stabilized by a row-max subtraction.

    With ``causal`` set, entry (i, j) of each trailing matrix gets zero
    weight for j > i (the masked logits never enter the row max, so a
    perturbation there cannot change visible outputs even bitwise).
    """
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"softmax_rows needs at least 2-D input, got shape {a.shape}")
    _check_finite("softmax_rows(input)", a.data)
    x = a.data
    if causal:
        m, n = a.shape[-2], a.shape[-1]
        visible = np.tril(np.ones((m, n), dtype=bool))
        x = np.where(visible, x, -np.inf)
    row_max = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - row_max)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))
    _check_finite("softmax_rows", out.data)
    if _tracking(a):
        def backward_fn(g):
            y = out.data
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accumulate(a, y * (g - dot))
        _record("softmax_rows", out, backward_fn)
    return out


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x * gain / sqrt(mean(x^2) + eps) along the last dimension."""
    a, gain = _as_tensor(a), _as_tensor(gain)
    d = a.shape[-1]
    if gain.shape != (d,):
        raise ShapeError(f"rms_norm gain shape {gain.shape} does not match last dim {d}")
    r = np.sqrt(np.mean(a.data * a.data, axis=-1, keepdims=True) + eps)
    out = Tensor(a.data * gain.data / r)
    _check_finite("rms_norm", out.data)
    if _tracking(a, gain):
        def backward_fn(g):
            if a.requires_grad:
                gg = g * gain.data
                inner = (gg * a.data).sum(axis=-1, keepdims=True)
                _accumulate(a, gg / r - a.data * inner / (d * r ** 3))
            if gain.requires_grad:
                _accumulate(gain, (g * a.data / r).reshape(-1, d).sum(axis=0))
        _record("rms_norm", out, backward_fn)
    return out


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of rows of logits against integer targets."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy_mean shapes disagree: logits {logits.shape}, targets {targets.shape}")
    n, v = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise InputError(f"target id out of range [0, {v})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(-logp[np.arange(n), targets].mean())
    _check_finite("cross_entropy_mean", out.data)
    if _tracking(logits):
        p = np.exp(logp)

        def backward_fn(g):
            d = p.copy()
            d[np.arange(n), targets] -= 1.0
            _accumulate(logits, d * (float(g) / n))
        _record("cross_entropy_mean", out, backward_fn)
    return out


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum())
    if _tracking(a):
        def backward_fn(g):
            _accumulate(a, np.full_like(a.data, float(g)))
        _record("sum_all", out, backward_fn)
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / _as_tensor(a).size)


# ---------------------------------------------------------------------------
# rotary phase

def _rope_tables(n: int, dh: int, offset: int, base: float):
    half = dh // 2
    inv = base ** (-np.arange(half) * 2.0 / dh)
    ang = (offset + np.arange(n))[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope(x: Tensor, offset: int = 0, base: float = 10000.0) -> Tensor:
    """Rotary position phase over (..., N, d) with d even.

    Adjacent value pairs are rotated by position-dependent angles;
    ``offset`` shifts the position index for incremental decoding.
    """
    x = _as_tensor(x)
    if x.ndim < 2 or x.shape[-1] % 2 != 0:
        raise ShapeError(f"rope needs (..., N, d) with d even, got shape {x.shape}")
    n, dh = x.shape[-2], x.shape[-1]
    cos, sin = _rope_tables(n, dh, offset, base)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos
    out = Tensor(out_data)
    if _tracking(x):
        def backward_fn(g):
            ge, go = g[..., 0::2], g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = ge * cos + go * sin
            gx[..., 1::2] = -ge * sin + go * cos
            _accumulate(x, gx)
        _record("rope", out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# gated decay scan

def decay_scan_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                       decay: np.ndarray, keep_states: bool = False):
    """Raw scan kernel on (B, N, d) arrays.

    Per step: state <- diag(decay_t) state + outer(k_t, v_t);
    output_t = state^T q_t. Returns (outputs, states) where states is the
    (B, N, d_k, d_v) stack when requested (needed for the backward pass),
    else None. This same kernel backs both the autodiff primitive and the
    benchmark timings.
    """
    b, n, dk = q.shape
    dv = v.shape[-1]
    s = np.zeros((b, dk, dv))
    o = np.empty((b, n, dv))
    states = np.empty((b, n, dk, dv)) if keep_states else None
    for t in range(n):
        np.multiply(s, decay[:, t, :, None], out=s)
        s += k[:, t, :, None] * v[:, t, None, :]
        if keep_states:
            states[:, t] = s
        o[:, t] = np.einsum("bd,bdv->bv", q[:, t], s)
    return o, states


def _decay_scan_backward(go, q, k, v, decay, states):
    b, n, dk = q.shape
    dv = v.shape[-1]
    gq = np.empty_like(q)
    gk = np.empty_like(k)
    gv = np.empty_like(v)
    gd = np.empty_like(decay)
    ds = np.zeros((b, dk, dv))
    for t in range(n - 1, -1, -1):
        st = states[:, t]
        gq[:, t] = np.einsum("bdv,bv->bd", st, go[:, t])
        ds += q[:, t, :, None] * go[:, t, None, :]
        gk[:, t] = np.einsum("bdv,bv->bd", ds, v[:, t])
        gv[:, t] = np.einsum("bdv,bd->bv", ds, k[:, t])
        prev = states[:, t - 1] if t > 0 else np.zeros_like(st)
        gd[:, t] = np.einsum("bdv,bdv->bd", ds, prev)
        np.multiply(ds, decay[:, t, :, None], out=ds)
    return gq, gk, gv, gd


def decay_scan(q: Tensor, k: Tensor, v: Tensor, decay: Tensor) -> Tensor:
    """Differentiable causal scan with per-step, per-channel state decay.

    Shapes: q, k, decay (..., N, d_k) all equal; v (..., N, d_v). The
    leading dimensions batch independent sequences (e.g. batch x heads).
    The backward rule propagates through the recurrence analytically, so
    a length-N scan is one tape node rather than N.
    """
    q, k, v, decay = map(_as_tensor, (q, k, v, decay))
    if q.shape != k.shape or q.shape != decay.shape:
        raise ShapeError(
            f"decay_scan q/k/decay shapes must match: {q.shape}, {k.shape}, {decay.shape}")
    if v.shape[:-1] != q.shape[:-1]:
        raise ShapeError(f"decay_scan v shape {v.shape} does not align with q shape {q.shape}")
    if q.ndim < 2:
        raise ShapeError(f"decay_scan needs (..., N, d) input, got shape {q.shape}")
    lead = q.shape[:-2]
    n, dk = q.shape[-2], q.shape[-1]
    dv = v.shape[-1]
    b = int(np.prod(lead)) if lead else 1
    qb = q.data.reshape(b, n, dk)
    kb = k.data.reshape(b, n, dk)
    vb = v.data.reshape(b, n, dv)
    db = decay.data.reshape(b, n, dk)
    track = _tracking(q, k, v, decay)
    o, states = decay_scan_forward(qb, kb, vb, db, keep_states=track)
    out = Tensor(o.reshape(*lead, n, dv))
    _check_finite("decay_scan", out.data)
    if track:
        def backward_fn(g):
            gq, gk, gv, gd = _decay_scan_backward(
                g.reshape(b, n, dv), qb, kb, vb, db, states)
            _accumulate(q, gq.reshape(q.shape))
            _accumulate(k, gk.reshape(k.shape))
            _accumulate(v, gv.reshape(v.shape))
            _accumulate(decay, gd.reshape(decay.shape))
        _record("decay_scan", out, backward_fn)
    return out
