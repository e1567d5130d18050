"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the attention backbone and heads need are provided. Every
operation that involves a tensor with ``requires_grad`` appends a node to the
graph; :meth:`Tensor.backward` replays those nodes in reverse creation order.

Storage defaults to float32. Pass ``dtype=np.float64`` (or use
:func:`default_dtype`) for gradient checks.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_state = threading.local()
_seq = itertools.count()

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class EmptyBatchError(ValueError):
    pass


class Node:
    """One recorded operation: its output, inputs and vector-Jacobian rule."""

    __slots__ = ("seq", "out_id", "parents", "vjp")

    def __init__(self, out: "Tensor", parents: tuple, vjp: Callable):
        self.seq = next(_seq)
        # id only: holding the output itself would create a reference cycle
        self.out_id = id(out)
        self.parents = parents
        self.vjp = vjp


class GradTape:
    """Nodes reachable from a loss, kept in the order they were appended."""

    def __init__(self, root: "Tensor"):
        found: dict[int, Node] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.seq in found:
                continue
            found[node.seq] = node
            stack.extend(node.parents)
        self.nodes = [found[s] for s in sorted(found)]

    def __len__(self):
        return len(self.nodes)

    def run(self, root: "Tensor", seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent._accumulate(pg)
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        if root._node is None and root.requires_grad:
            root._accumulate(seed)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = _dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- basics ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        tape = GradTape(self)
        tape.run(self, np.ones_like(self.data))

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(out, tuple(parents), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)), dtype=np.float64).astype(g.dtype)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _make((xd * cdf).astype(xd.dtype, copy=False), (x,), vjp)


# -- linear algebra / shape -------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                a2 = np.broadcast_to(ad, g.shape[:-1] + (k,)).reshape(-1, k)
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def roll(x: Tensor, shift, axis) -> Tensor:
    neg_shift = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return _make(np.roll(x.data, shift, axis), (x,), lambda g: (np.roll(g, neg_shift, axis),))


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    basic = _basic_index(idx)

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), vjp)


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]``; repeated indices accumulate gradient."""
    index = np.asarray(index)
    src_shape, dtype = table.shape, table.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index.reshape(-1), g.reshape(-1, *src_shape[1:]))
        return (full,)

    return _make(table.data[index], (table,), vjp)


# -- reductions -------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(x.dtype),)

    return _make(np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# -- normalisation / probabilities -----------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64)
    rstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xc = xc.astype(xd.dtype)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def vjp(g):
        gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0, dtype=np.float64).astype(xd.dtype)
        if beta.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0, dtype=np.float64).astype(xd.dtype)
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True, dtype=np.float64)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
            gx = (rstd * (gh - m1 - xhat * m2)).astype(xd.dtype)
        return gx, gg, gb

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), vjp)


def _check_finite(a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite value in softmax input")


def _softmax_np(xd: np.ndarray) -> np.ndarray:
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    return (e / s).astype(xd.dtype)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {x.shape}")
    _check_finite(x.data)
    y = _softmax_np(x.data)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64).astype(y.dtype)
        return (y * (g - dot),)

    return _make(y, (x,), vjp)


def _log_softmax_np(xd: np.ndarray) -> np.ndarray:
    z = xd.astype(np.float64) - xd.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _targets_to_onehot(targets, n: int, c: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 2:
        if t.shape != (n, c):
            raise ShapeError(f"one-hot targets shape {t.shape} does not match logits ({n}, {c})")
        return t.astype(np.float64)
    t = t.reshape(-1).astype(np.int64)
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for {n} rows")
    if t.min(initial=0) < 0 or t.max(initial=0) >= c:
        raise ValueError(f"target index out of range for {c} classes")
    oh = np.zeros((n, c))
    oh[np.arange(n), t] = 1.0
    return oh


def weighted_cross_entropy(logits: Tensor, targets, weights: np.ndarray) -> Tensor:
    """``sum_r weights[r] * -log softmax(logits[r])[target[r]]``."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"cross_entropy needs logits [B, C>=2], got {logits.shape}")
    n, c = logits.shape
    oh = _targets_to_onehot(targets, n, c)
    w = np.asarray(weights, dtype=np.float64).reshape(n, 1)
    logp = _log_softmax_np(logits.data)
    loss = -(w * oh * logp).sum()

    def vjp(g):
        p = np.exp(logp)
        return ((float(g) * w * (p * oh.sum(axis=1, keepdims=True) - oh)).astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean cross-entropy over the rows kept by ``mask`` (all rows by default)."""
    n = logits.shape[0] if logits.ndim else 0
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if keep.shape[0] != n:
        raise ShapeError(f"mask of length {keep.shape[0]} for {n} rows")
    kept = int(keep.sum())
    if kept == 0:
        raise EmptyBatchError("every row is masked out")
    return weighted_cross_entropy(logits, targets, keep / kept)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
