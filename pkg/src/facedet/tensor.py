"""Minimal reverse-mode autodiff on dense float64 arrays.

A Tensor wraps a numpy array plus an optional backward closure; calling
``backward()`` on a scalar propagates gradients through the recorded tape.
Only the operations the detector needs are provided.  Forward results are
deterministic given (inputs, weights); elementwise reductions use numpy's
fixed serial order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping ----------------------------------------------------
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
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.shape).copy()
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Build a tape node; used by custom ops outside this module too."""
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def accumulate(p: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to a parent tensor."""
    if not p.requires_grad:
        return
    if p.grad is None:
        p.grad = np.zeros_like(p.data)
    p.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return make_op(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        accumulate(a, _unbroadcast(g * b.data, a.shape))
        accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make_op(out_data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return make_op(a.data @ b.data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        accumulate(x, g * mask)

    return make_op(np.where(mask, x.data, 0.0), (x,), bw)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def bw(g):
        accumulate(x, g * out_data)

    return make_op(out_data, (x,), bw)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        accumulate(x, g / x.data)

    return make_op(np.log(x.data), (x,), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        accumulate(x, np.broadcast_to(gg, x.shape).copy())

    return make_op(out_data, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        accumulate(x, g.reshape(x.shape))

    return make_op(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)

    def bw(g):
        accumulate(x, g.transpose(inv))

    return make_op(x.data.transpose(axes), (x,), bw)


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        accumulate(x, gx)

    return make_op(x.data[idx], (x,), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            accumulate(t, piece)

    return make_op(out_data, ts, bw)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Row-stable softmax; rows along `axis` sum to 1."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        accumulate(x, (g - dot) * s)

    return make_op(s, (x,), bw)


# -- spatial ops ---------------------------------------------------------

def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIKK weights."""
    x, w = as_tensor(x), as_tensor(w)
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {w.shape} does not fit padded input {x.shape}")
    xp = _pad2d(x.data, padding)
    out = np.zeros((n, cout, oh, ow))
    for p in range(kh):
        for q in range(kw):
            xs = xp[:, :, p : p + stride * oh : stride, q : q + stride * ow : stride]
            out += np.einsum("nchw,oc->nohw", xs, w.data[:, :, p, q], optimize=True)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data.reshape(1, cout, 1, 1)
        parents.append(b)

    def bw(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for p in range(kh):
            for q in range(kw):
                xs = xp[:, :, p : p + stride * oh : stride, q : q + stride * ow : stride]
                if gw is not None:
                    gw[:, :, p, q] += np.einsum("nohw,nchw->oc", g, xs, optimize=True)
                if x.requires_grad:
                    gxp[:, :, p : p + stride * oh : stride, q : q + stride * ow : stride] += np.einsum(
                        "nohw,oc->nchw", g, w.data[:, :, p, q], optimize=True
                    )
        if x.requires_grad:
            gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding]
            accumulate(x, gx)
        if gw is not None:
            accumulate(w, gw)
        if b is not None:
            accumulate(b, g.sum(axis=(0, 2, 3)))

    return make_op(out, parents, bw)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must be divisible by k.

    Gradient routes to exactly one input cell per window (first index on ties).
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"max_pool2d: {h}x{w} not divisible by {k}")
    oh, ow = h // k, w // k
    windows = (
        x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, oh, ow, k * k))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        )
        accumulate(x, gx)

    return make_op(out, (x,), bw)


def pad_to_multiple(x: Tensor, multiple: int) -> Tensor:
    """Zero-pad bottom/right of an NCHW tensor so H and W divide `multiple`."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    out_data = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)))

    def bw(g):
        accumulate(x, g[:, :, :h, :w])

    return make_op(out_data, (x,), bw)
