"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape when one is active (``with Tape() as tape:``)
and at least one input requires a gradient; outside a tape every op is a plain
numpy computation, which is what sampling and evaluation use.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()
_DEFAULT_DTYPE = np.float32


def default_dtype():
    return getattr(_state, "dtype", _DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype.type


@contextmanager
def precision(dtype):
    """Temporarily switch the storage/compute precision (float32 or float64)."""
    previous = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators broadcast with numpy semantics; `elementwise` is the strict form
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one backward pass.

    Records are appended in creation order, so they are already topologically
    sorted. The tape is cleared by :meth:`backward`.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(loss, self)


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.records.append(_Record(out, tuple(parents), backward))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns gradients for every leaf tensor with ``requires_grad`` reached from
    the loss, and stores them on ``.grad``. The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise RuntimeError("no tape to differentiate")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        produced.add(id(rec.out))
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        parent_grads = rec.backward(g)
        for p, pg in zip(rec.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                leaves[key] = p
    tape.records.clear()
    result = {}
    for key, g in grads.items():
        if key in produced or key == id(loss):
            continue
        t = leaves[key]
        t.grad = g
        result[t] = g
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(b):
    if isinstance(b, Tensor):
        return b
    return Tensor(np.asarray(b, dtype=default_dtype()))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    b = _operand(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b) -> Tensor:
    b = _operand(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b) -> Tensor:
    b = _operand(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: Tensor, b) -> Tensor:
    b = _operand(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by exact zero")
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


_KINDS = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    """Strict elementwise op: ``b`` must be a scalar or have exactly ``a``'s shape."""
    if kind == "scale":
        if isinstance(b, Tensor) or np.ndim(b) != 0:
            raise ValueError("scale takes a scalar factor")
        return scale(a, float(b))
    if kind not in _KINDS:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if isinstance(b, Tensor) or np.ndim(b) != 0:
        b = as_tensor(b)
        if b.shape != a.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return _KINDS[kind](a, b)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"inner extent mismatch: {ad.shape} x {bd.shape}")
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x of shape (N, in) and w of shape (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """1-D cross-correlation with zero padding.

    ``x`` is (C_in, L) or (N, C_in, L); ``w`` is (C_out, C_in, k).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xd = x.data
    unbatched = xd.ndim == 2
    if unbatched:
        xd = xd[None]
    n, cin, length = xd.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels, kernel expects {cin_w}")
    lout = (length + 2 * pad - k) // stride + 1
    if length + 2 * pad < k or lout < 1:
        raise ValueError("convolution output length is empty")
    span = stride * (lout - 1) + 1
    # channel-first columns (N, C_in*k, L_out) built from k strided copies;
    # zero padding is written directly instead of materializing a padded input
    cols = np.empty((n, cin, k, lout), dtype=xd.dtype)
    for j in range(k):
        off = j - pad
        lo = (-off + stride - 1) // stride if off < 0 else 0
        hi = min(lout, (length - 1 - off) // stride + 1) if off < length else 0
        hi = max(hi, lo)
        if lo:
            cols[:, :, j, :lo] = 0
        if hi < lout:
            cols[:, :, j, hi:] = 0
        if hi > lo:
            start = off + stride * lo
            cols[:, :, j, lo:hi] = xd[:, :, start:start + stride * (hi - lo - 1) + 1:stride]
    cols = cols.reshape(n, cin * k, lout)
    wmat = w.data.reshape(cout, cin * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    if unbatched:
        out = out[0]

    def bw(g):
        g3 = g[None] if unbatched else g
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(cout, cin, k)
        gcols = np.matmul(wmat.T, g3).reshape(n, cin, k, lout)
        gxp = np.zeros((n, cin, length + 2 * pad + stride), dtype=g.dtype)
        for j in range(k):
            gxp[:, :, j:j + span:stride] += gcols[:, :, j]
        gx = gxp[:, :, pad:pad + length]
        if unbatched:
            gx = gx[0]
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, w, bias) if bias is not None else (x, w)
    return _make(out, parents, bw)


# ---------------------------------------------------------------- normalization


def _iadd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a += b
    return a


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """GroupNorm over (channels-in-group x time) for x of shape (C, L) or (N, C, L)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    unbatched = xd.ndim == 2
    if unbatched:
        xd = xd[None]
    n, c, length = xd.shape
    if groups < 1 or c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xr = xd.reshape(n, groups, -1)
    mu = xr.mean(axis=2, keepdims=True)
    xhat = xr - mu
    var = np.einsum("ngk,ngk->ng", xhat, xhat)[:, :, None] / xr.shape[2]
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    xhat = xhat.reshape(n, c, length)
    out = xhat
    if gamma is not None:
        out = out * gamma.data[None, :, None]
    if beta is not None:
        out = out + beta.data[None, :, None] if gamma is None else _iadd(out, beta.data[None, :, None])
    if unbatched:
        out = out[0]

    def bw(g):
        g3 = g[None] if unbatched else g
        ggamma = (g3 * xhat).sum(axis=(0, 2)) if gamma is not None else None
        gbeta = g3.sum(axis=(0, 2)) if beta is not None else None
        gx = g3 * gamma.data[None, :, None] if gamma is not None else g3
        gx = gx.reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gx - gx.mean(axis=2, keepdims=True)
                    - xh * (gx * xh).mean(axis=2, keepdims=True))
        gx = gx.reshape(n, c, length)
        if unbatched:
            gx = gx[0]
        return gx, ggamma, gbeta

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)

    def bw_select(g):
        gx, gg, gb = bw(g)
        res = [gx]
        if gamma is not None:
            res.append(gg)
        if beta is not None:
            res.append(gb)
        return res

    return _make(out, parents, bw_select)


# ---------------------------------------------------------------- activations


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _make(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: str = "silu") -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(logits: Tensor, targets, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against label-smoothed targets.

    ``targets`` are integer class indices in [0, K). The smoothed target puts
    ``1 - s + s/K`` on the true class and ``s/K`` on every other class.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    z = logits.data
    n, k = z.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ValueError("one target per row required")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    q = np.full((n, k), smoothing / k, dtype=z.dtype)
    q[np.arange(n), targets] += 1.0 - smoothing
    logp = log_softmax(z)
    loss = -(q * logp).sum() / n
    p = np.exp(logp)
    return _make(np.asarray(loss, dtype=z.dtype), (logits,), lambda g: (g * (p - q) / n,))


def mse(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != t.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    m = diff.size
    loss = np.asarray((diff * diff).sum() / m, dtype=pred.data.dtype)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def bw(g):
        gp = g * 2.0 * diff / m
        return (gp, -gp) if len(parents) == 2 else (gp,)

    return _make(loss, parents, bw)


# ---------------------------------------------------------------- shape & reductions


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat every time step ``factor`` times along the last axis."""
    shape = x.shape

    def bw(g):
        return (g.reshape(*shape, factor).sum(axis=-1),)

    return _make(np.repeat(x.data, factor, axis=-1), (x,), bw)


def take_rows(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]`` (embedding gather)."""
    idx = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError("row index out of range")
    return _make(table.data[idx], (table,), bw)


def expand_time(x: Tensor, length: int) -> Tensor:
    """(N, D) -> (N, D, length) by tiling along a new trailing axis."""
    return _make(np.repeat(x.data[:, :, None], length, axis=2), (x,),
                 lambda g: (g.sum(axis=2),))


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
