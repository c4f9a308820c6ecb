"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every operation whose inputs require gradients.
:meth:`Tape.backward` replays the record in exact reverse order and
accumulates gradients into the leaves.  Values that do not require
gradients (constants, detached values, values built on a non-recording
tape) carry no tape at all, so inference runs without bookkeeping.

Broadcasting is limited to scalar-vs-array; anything else goes through
an explicit :func:`expand`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import special
from .errors import ContractError, DomainError, ShapeError


class DiffValue:
    __slots__ = ("value", "tape", "node_id", "requires_grad")
    __array_ufunc__ = None  # make ndarray <op> DiffValue defer to our reflected ops

    def __init__(self, value, tape=None, node_id=-1, requires_grad=False):
        self.value = value
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"DiffValue(shape={self.value.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


@dataclass
class _Node:
    out_id: int
    parents: tuple
    backward: Callable


class Tape:
    """Operation record for one forward/backward pass.

    With ``record=False`` leaves are created without gradient tracking and
    nothing is stored.
    """

    def __init__(self, record=True):
        self.record = record
        self._nodes: list[_Node] = []
        self._leaves: list[DiffValue] = []
        self._next_id = 0

    def __len__(self):
        return len(self._nodes)

    def _new_id(self):
        self._next_id += 1
        return self._next_id - 1

    def leaf(self, value, requires_grad=True):
        arr = np.array(value, dtype=np.float64)
        if not self.record or not requires_grad:
            return DiffValue(arr)
        v = DiffValue(arr, self, self._new_id(), True)
        self._leaves.append(v)
        return v

    def backward(self, loss: DiffValue) -> "GradTable":
        if loss.value.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        table = GradTable()
        grads = {}
        if loss.requires_grad:
            if loss.tape is not self:
                raise ContractError("loss was recorded on a different tape")
            grads[loss.node_id] = np.ones((), dtype=np.float64)
        for node in reversed(self._nodes if grads else ()):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
        for leaf in self._leaves:
            g = grads.get(leaf.node_id)
            table._grads[leaf.node_id] = np.zeros_like(leaf.value) if g is None else g
        return table


class GradTable:
    """Gradients keyed by leaf; unreachable leaves map to zeros."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}

    def __getitem__(self, leaf: DiffValue) -> np.ndarray:
        if not leaf.requires_grad:
            return np.zeros_like(leaf.value)
        return self._grads[leaf.node_id]

    def __contains__(self, leaf):
        return leaf.requires_grad and leaf.node_id in self._grads

    def __len__(self):
        return len(self._grads)


def constant(value) -> DiffValue:
    return DiffValue(np.array(value, dtype=np.float64))


def _lift(x) -> DiffValue:
    if isinstance(x, DiffValue):
        return x
    return constant(x)


def _record(value, parents: Sequence[DiffValue], backward) -> DiffValue:
    tape = None
    for p in parents:
        if p.requires_grad:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ContractError("operands belong to different tapes")
    if tape is None:
        return DiffValue(value)
    out = DiffValue(value, tape, tape._new_id(), True)
    tape._nodes.append(_Node(out.node_id, tuple(parents), backward))
    return out


def detach(a) -> DiffValue:
    """Same value, cut from the tape."""
    return DiffValue(_lift(a).value)


# ---------------------------------------------------------------- elementwise

def _check_binary(a: DiffValue, b: DiffValue, op):
    sa, sb = a.value.shape, b.value.shape
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"{op}: shapes {sa} and {sb} differ and neither is a scalar")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "mul")
    av, bv = a.value, b.value

    def back(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _record(av * bv, (a, b), back)


def div(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("div: zero divisor")
    out = av / bv

    def back(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), back)


def neg(a) -> DiffValue:
    a = _lift(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def exp(a) -> DiffValue:
    a = _lift(a)
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> DiffValue:
    a = _lift(a)
    av = a.value
    if not np.all(av > 0):
        raise DomainError("log of non-positive value")
    return _record(np.log(av), (a,), lambda g: (g / av,))


def abs(a) -> DiffValue:  # noqa: A001 - mirrors the op name
    a = _lift(a)
    av = a.value
    return _record(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def relu(a) -> DiffValue:
    a = _lift(a)
    mask = a.value > 0
    return _record(np.maximum(a.value, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a) -> DiffValue:
    a = _lift(a)
    av = a.value
    return _record(np.logaddexp(0.0, av), (a,), lambda g: (g * _sigmoid(av),))


def clip(a, lo=None, hi=None) -> DiffValue:
    """Clamp to ``[lo, hi]``; gradient is zero wherever the clamp is active."""
    a = _lift(a)
    av = a.value
    keep = np.ones(av.shape, dtype=bool)
    out = av
    if lo is not None:
        keep &= av >= lo
        out = np.maximum(out, lo)
    if hi is not None:
        keep &= av <= hi
        out = np.minimum(out, hi)
    return _record(np.array(out, dtype=np.float64), (a,), lambda g: (g * keep,))


def digamma(a) -> DiffValue:
    a = _lift(a)
    av = a.value
    return _record(special.digamma(av), (a,), lambda g: (g * special.trigamma(av),))


def lgamma(a) -> DiffValue:
    a = _lift(a)
    av = a.value
    return _record(special.lgamma(av), (a,), lambda g: (g * special.digamma(av),))


# ---------------------------------------------------------------- structure

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d value")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind, a, axes=None, keepdims=False) -> DiffValue:
    a = _lift(a)
    shape = a.shape
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    if kind == "sum":
        out = a.value.sum(axis=axes, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        out = a.value.mean(axis=axes, keepdims=keepdims)
        scale = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def back(g):
        return (np.broadcast_to(np.reshape(g, kept) * scale, shape),)

    return _record(np.asarray(out, dtype=np.float64), (a,), back)


def sum(a, axes=None, keepdims=False) -> DiffValue:  # noqa: A001
    return reduce("sum", a, axes, keepdims)


def mean(a, axes=None, keepdims=False) -> DiffValue:
    return reduce("mean", a, axes, keepdims)


def reshape(a, shape) -> DiffValue:
    a = _lift(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record(out, (a,), lambda g: (np.reshape(g, old),))


def expand(a, shape) -> DiffValue:
    """Broadcast size-1 axes (or a scalar) up to ``shape``."""
    a = _lift(a)
    shape = tuple(shape)
    src = a.shape
    if src == shape:
        return a
    if src != () and (len(src) != len(shape)
                      or any(s not in (1, t) for s, t in zip(src, shape))):
        raise ShapeError(f"cannot expand {src} to {shape}")
    if src == ():
        axes = tuple(range(len(shape)))
    else:
        axes = tuple(i for i, (s, t) in enumerate(zip(src, shape)) if s != t)

    def back(g):
        return (np.reshape(g.sum(axis=axes), src),)

    return _record(np.broadcast_to(a.value, shape), (a,), back)


def take(a, indices, axis=0) -> DiffValue:
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    out = np.take(a.value, idx, axis=axis)

    def back(g):
        full = np.zeros(shape, dtype=np.float64)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record(out, (a,), back)


def softmax(a, axis=1) -> DiffValue:
    a = _lift(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(p, (a,), back)


# ---------------------------------------------------------------- convolution

def conv2d(x, kernel, stride=1, padding=0) -> DiffValue:
    """Cross-correlation of ``[N,C,H,W]`` input with ``[O,C,kH,kW]`` kernel."""
    x, kernel = _lift(x), _lift(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    cols = _im2col(x.value.transpose(0, 2, 3, 1), kh, kw, stride, padding)
    kmat = kernel.value.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = np.ascontiguousarray((cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = None
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if not x.requires_grad:
            return None, gk
        if stride == 1:
            # full correlation of the output gradient with the flipped kernel
            flipped = kernel.value[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
            gcols = _im2col(g.transpose(0, 2, 3, 1), kh, kw, 1, (kh - 1, kw - 1))
            full = (gcols @ flipped.T).reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
            return full[:, :, padding:padding + h, padding:padding + w], gk
        gcols = (g2 @ kmat).reshape(n, ho, wo, kh, kw, c)
        gxp = np.zeros((n, c, hp, wp), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
        return gxp[:, :, padding:padding + h, padding:padding + w], gk

    return _record(out, (x, kernel), back)


def _im2col(xv, kh, kw, stride, padding):
    """Channels-last input ``[N,H,W,C]``; rows (n, out_y, out_x), columns (ky, kx, c)."""
    ph, pw = padding if isinstance(padding, tuple) else (padding, padding)
    if ph or pw:
        xv = np.pad(xv, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xv, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


_UNARY = {
    "neg": neg, "exp": exp, "log": log, "abs": abs, "relu": relu, "softplus": softplus,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind, a, b=None) -> DiffValue:
    """Dispatch by name, e.g. ``elementwise("mul", x, y)``."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


def backward(loss: DiffValue) -> GradTable:
    if loss.value.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return GradTable()
    return loss.tape.backward(loss)
