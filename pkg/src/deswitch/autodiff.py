"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors wrap numpy arrays (row-major, 64-bit). Operations record their
inputs and a backward closure on the output tensor; ``backward`` walks the
implicit graph in reverse topological order and fills ``.grad`` on every
reachable leaf that requires gradients. Graphs are built per call
(define-by-run) and are single-threaded; tensors detached from any graph
are immutable values and safe to share read-only.

Calling ``backward`` a second time on the same loss, or backpropagating
into a leaf whose ``.grad`` is already populated, raises instead of
accumulating: silent accumulation hides training bugs. Use ``zero_grad``
between steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording inside the block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float64 array participating in a reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward_fn: Callable | None = None,
                 _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._op = _op
        self._backward_done = False

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swap_last(self):
        """Transpose the last two axes (matrix transpose with batch dims)."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    if req:
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward_fn=backward_fn, _op=op)
    return Tensor(data)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bw(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g, acc):
        acc(a, _unbroadcast(g * bd, a.shape))
        acc(b, _unbroadcast(g * ad, b.shape))

    return _make(out, (a, b), bw, "mul")


def texp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g, acc):
        acc(a, g * out)

    return _make(out, (a,), bw, "exp")


def tlog(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    ad = a.data

    def bw(g, acc):
        acc(a, g / ad)

    return _make(np.log(ad), (a,), bw, "log")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def bw(g, acc):
        acc(a, g * mask)

    return _make(a.data * mask, (a,), bw, "relu")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True by `value` (constant mask)."""
    a = _as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, value, a.data)

    def bw(g, acc):
        acc(a, np.where(mask, 0.0, g))

    return _make(out, (a,), bw, "masked_fill")


# ----------------------------------------------------------------------
# reductions / normalizations
# ----------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g, shape).copy())
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            acc(a, np.broadcast_to(gk, shape).copy())

    return _make(out, (a,), bw, "sum")


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; -inf entries get exactly zero weight."""
    a = _as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isneginf(m), 0.0, m)  # all-masked slices would NaN out
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, acc):
        inner = (g * out).sum(axis=axis, keepdims=True)
        acc(a, out * (g - inner))

    return _make(out, (a,), bw, "softmax")


def log_sum_exp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) along `axis` with max-subtraction; tolerates -inf."""
    a = _as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    finite = ~np.isneginf(m)
    msafe = np.where(finite, m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = msafe + np.log(np.exp(x - msafe).sum(axis=axis, keepdims=True))
    out_k = np.where(finite, out_k, -np.inf)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g, acc):
        with np.errstate(invalid="ignore"):
            w = np.exp(x - out_k)
        w = np.where(np.isneginf(x), 0.0, w)
        gk = g if keepdims else np.expand_dims(g, axis)
        acc(a, w * gk)

    return _make(out, (a,), bw, "log_sum_exp")


def log_softmax(a, axis: int = -1) -> Tensor:
    return sub(a, log_sum_exp(a, axis=axis, keepdims=True))


# ----------------------------------------------------------------------
# shape / indexing
# ----------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def bw(g, acc):
        acc(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g, acc):
        acc(a, np.transpose(g, inv))

    return _make(out, (a,), bw, "transpose")


def getitem(a, key) -> Tensor:
    a = _as_tensor(a)
    out = a.data[key]
    shape = a.shape

    def bw(g, acc):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        acc(a, full)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def take(a, indices) -> Tensor:
    """Gather rows along axis 0 with an integer index array (embedding lookup)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ValueError(f"take: index out of range for axis of size {a.shape[0]}")
    out = np.take(a.data, idx, axis=0)
    shape = a.shape

    def bw(g, acc):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape((idx.size,) + shape[1:]))
        acc(a, full)

    return _make(out, (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, acc):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            acc(t, piece)

    return _make(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g, acc):
        for i, t in enumerate(tensors):
            acc(t, np.take(g, i, axis=axis))

    return _make(out, tuple(tensors), bw, "stack")


def pad(a, pad_width, value: float = 0.0) -> Tensor:
    a = _as_tensor(a)
    out = np.pad(a.data, pad_width, constant_values=value)
    slices = tuple(slice(lo, lo + n) for (lo, _hi), n in zip(pad_width, a.shape))

    def bw(g, acc):
        acc(a, g[slices])

    return _make(out, (a,), bw, "pad")


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with broadcast leading batch dims: [..,m,k] @ [..,k,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bw(g, acc):
        acc(a, _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape))
        acc(b, _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape))

    return _make(out, (a, b), bw, "matmul")


def conv2d_stride2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 2 on both spatial axes, trailing zero padding.

    x: [B, C, H, W], w: [O, C, 3, 3], b: [O]. Output spatial dims are
    ceil(H/2) x ceil(W/2); the required (out-1)*2 + 3 - in zero rows and
    columns are appended at the bottom/right only, so window positions are
    independent of the input length (keeps batched and unpadded forwards
    aligned).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    B, C, H, W = x.shape
    O = w.shape[0]
    if w.shape != (O, C, 3, 3):
        raise ValueError(f"conv2d_stride2: weight shape {w.shape} incompatible with input {x.shape}")
    Ho, Wo = -(-H // 2), -(-W // 2)
    ph = (Ho - 1) * 2 + 3 - H
    pw = (Wo - 1) * 2 + 3 - W
    pads = ((0, 0), (0, 0), (0, ph), (0, pw))
    xp = np.pad(x.data, pads)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
    out = np.einsum("bchwij,ocij->bohw", win, w.data, optimize=True) + b.data[None, :, None, None]
    wd = w.data

    def bw(g, acc):
        acc(b, g.sum(axis=(0, 2, 3)))
        acc(w, np.einsum("bchwij,bohw->ocij", win, g, optimize=True))
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                # each kernel tap maps output cell (h,w) to padded input (2h+i, 2w+j)
                gxp[:, :, i:i + 2 * Ho:2, j:j + 2 * Wo:2] += np.einsum(
                    "bohw,oc->bchw", g, wd[:, :, i, j], optimize=True)
        acc(x, gxp[:, :, pads[2][0]:pads[2][0] + H, pads[3][0]:pads[3][0] + W])

    return _make(out, (x, w, b), bw, "conv2d_stride2")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * gain.data + bias.data
    n = x.shape[-1]
    gd = gain.data

    def bw(g, acc):
        acc(bias, _unbroadcast(g, bias.shape))
        acc(gain, _unbroadcast(g * xn, gain.shape))
        gx = g * gd
        acc(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xn * (gx * xn).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gain, bias), bw, "layer_norm")


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout as a graph op; identity when not training or rate 0."""
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode requires a seeded generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


# ----------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, populating ``.grad`` on leaves.

    Raises if the loss is non-scalar, if backward already ran on this
    loss, or if a reachable leaf still carries a gradient from an earlier
    backward (call ``zero_grad`` between steps).
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward: already called on this loss; rebuild the graph")
    loss._backward_done = True

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_id = {id(t): t for t in topo}

    def acc(t: Tensor, g: np.ndarray):
        if not t.requires_grad:
            return
        if id(t) in grads:
            grads[id(t)] = grads[id(t)] + g
        else:
            grads[id(t)] = np.array(g, dtype=np.float64, copy=True)

    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._backward_fn is None:
            continue
        node._backward_fn(g, acc)

    for tid, g in grads.items():
        t = by_id.get(tid)
        if t is None or t._parents:
            continue
        if t.grad is not None:
            raise RuntimeError("backward: leaf already has a gradient; call zero_grad first")
        t.grad = g


def zero_grad(params: Iterable[Tensor] | dict) -> None:
    """Clear gradients on an iterable (or dict of) tensors."""
    values = params.values() if isinstance(params, dict) else params
    for t in values:
        t.grad = None


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_elements: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued `f` against central differences.

    The relative error denominator is floored at 1e-3 so that near-zero
    gradients are judged on an absolute scale compatible with the finite
    difference noise floor.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    base = np.array(x.data, copy=True)

    xt = Tensor(base.copy(), requires_grad=True)
    loss = f(xt)
    if loss.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    backward(loss)
    analytic = (np.zeros(base.size) if xt.grad is None
                else xt.grad.reshape(-1).copy())

    numeric = np.empty(base.size)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(Tensor(base)).item()
            flat[i] = orig - h
            lo = f(Tensor(base)).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
    return GradCheckReport(max_rel_err=max_rel, tol=tol, n_elements=base.size)
