"""Dense array engine with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor` objects backed by numpy arrays.
When any input requires a gradient the op records its parents and a
vector-Jacobian product closure; :func:`backward` walks that record in
reverse topological order.

Only scalar-tensor broadcasting is supported. Anything else must be made
explicit with :func:`reshape` / :func:`expand`.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

_ids = itertools.count()
_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (float64 for gradient checks)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Ops inside the block record no graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "id", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.data.setflags(write=False)
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    data.setflags(write=False)
    out.id = next(_ids)
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), vjp, "softmax")


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        def vjp(g):
            return (np.broadcast_to(g, shape).astype(a.dtype),)
        return _make(np.asarray(a.data.sum()), (a,), vjp, "sum")
    ax = axis % a.data.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).astype(a.dtype),)

    return _make(a.data.sum(axis=ax), (a,), vjp, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    if out.size != a.data.size:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}")
    return _make(out.copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes to ``shape`` (ranks must match)."""
    shape = tuple(shape)
    if len(shape) != a.data.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise DimensionError(f"expand: cannot broadcast {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)

    def vjp(g):
        return (g.sum(axis=axes, keepdims=True),)

    return _make(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), vjp, "expand")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.data.ndim != nd or any(i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape))):
            raise DimensionError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def take(a: Tensor, index) -> Tensor:
    """Gather rows (axis 0) by integer index; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise DimensionError(f"take: index out of range for axis 0 of extent {n}")

    def vjp(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), vjp, "take")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with the bias row explicitly broadcast over rows of ``x``."""
    y = matmul(x, w)
    if b is None:
        return y
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return add(y, expand(reshape(b, (1, -1)), y.shape))


def _im2col(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    ho, wo = win.shape[1], win.shape[2]
    # (C, Ho, Wo, kh, kw) -> (C*kh*kw, Ho*Wo)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation of a C_in x H x W input with C_out x C_in x kh x kw weights."""
    if x.data.ndim != 3 or kernel.data.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got {kernel.shape}")
    if padding < 0:
        raise UsageError("conv2d: padding must be non-negative")
    _, h, w = x.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} (padding {padding})")
    cols = _im2col(x.data, kh, kw, padding)
    kmat = kernel.data.reshape(cout, -1)
    out = (kmat @ cols).reshape(cout, ho, wo)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
        out = out + bias.data[:, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def vjp(g):
        gm = g.reshape(cout, -1)
        gk = (gm @ cols.T).reshape(kernel.shape)
        dcols = (kmat.T @ gm).reshape(cin, kh, kw, ho, wo)
        gx = np.zeros((cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + ho, j:j + wo] += dcols[:, i, j]
        if padding:
            gx = gx[:, padding:padding + h, padding:padding + w]
        grads = (np.ascontiguousarray(gx), gk)
        return grads if bias is None else grads + (gm.sum(axis=1),)

    return _make(out, parents, vjp, "conv2d")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, Tensor]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns ``{leaf.id: gradient}``. Gradients are accumulated fresh on every
    call, so running backward twice on the same graph gives identical
    results. Leaves listed in ``wrt`` that the loss does not depend on get
    zero gradients.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.get(node.id)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                leaves[node.id] = node
            continue
        del grads[node.id]
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    result = {i: Tensor(grads[i], dtype=leaves[i].dtype) for i in leaves}
    if wrt is not None:
        wrt = list(wrt)
        result = {t.id: result.get(t.id, Tensor(np.zeros(t.shape), dtype=t.dtype)) for t in wrt}
    return result
