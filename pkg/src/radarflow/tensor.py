"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every operation records its parents and a backward closure.  Nodes carry a
monotonically increasing sequence number, so sorting the reachable graph by
that number recovers execution order; ``backward`` walks it in reverse and
visits each node exactly once.

Broadcasting is deliberately limited to scalar-with-tensor.  Anything else
goes through explicit ops (``expand``, ``gather``, ``linear``).
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .core import RadarFlowError

_seq = itertools.count()


class TensorError(RadarFlowError):
    pass


class ShapeMismatch(TensorError):
    pass


class InvalidAxis(TensorError):
    pass


class GatherOutOfBounds(TensorError):
    pass


class NonScalarRoot(TensorError):
    pass


class StaleTape(TensorError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op", "_stale")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._seq = next(_seq)
        self.op = op
        self._stale = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; every result is a constant."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Create an op output; the closure is only kept if a parent needs grad."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data, False, op=op)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise InvalidAxis(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def _is_scalar(x: Tensor) -> bool:
    return x.ndim == 0


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if _is_scalar(t) and g.ndim else g


def _binary_shapes(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0."""
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False, op="stop_gradient")


# --- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``b`` is added to every row."""
    x, w = _wrap(x), _wrap(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear: bias {b.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None,
                 x2.T @ g2 if w.requires_grad else None]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out.reshape(lead + (w.shape[1],)), parents, backward, "linear")


# --- shape ops ---------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeMismatch(f"transpose expects 2-D, got {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ax = _check_axis(tensors[0], axis)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != s0 for i, (s, s0) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def expand(x: Tensor, size: int) -> Tensor:
    """Repeat ``x`` along a new trailing axis of length ``size``."""
    out = np.repeat(x.data[..., None], size, axis=-1)
    return _make(out, (x,), lambda g: (g.sum(axis=-1),), "expand")


def _scatter_matrix(idx: np.ndarray, n: int):
    flat = idx.reshape(-1)
    m = len(flat)
    return sp.csr_matrix((np.ones(m), (flat, np.arange(m))), shape=(n, m))


def gather(x: Tensor, indices) -> Tensor:
    """Rows of ``x`` selected by an integer index array of any shape."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise GatherOutOfBounds("gather indices must be integers")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise GatherOutOfBounds(f"gather index out of range for {n} rows")
    out = x.data[idx]
    tail = x.shape[1:]

    def backward(g):
        g2 = g.reshape(idx.size, -1)
        gx = _scatter_matrix(idx, n) @ g2
        return (np.asarray(gx).reshape((n,) + tail),)

    return _make(out, (x,), backward, "gather")


# --- reductions --------------------------------------------------------------

def tsum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")
    ax = _check_axis(x, axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return _make(x.data.sum(axis=ax), (x,), backward, "sum")


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.size if axis is None else x.shape[_check_axis(x, axis)]
    return scale(tsum(x, axis), 1.0 / n)


def tmax(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; gradient goes to the first maximal entry only."""
    ax = _check_axis(x, axis)
    arg = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _make(out, (x,), backward, "max")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def squared_norm(x: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(x, axis)

    def backward(g):
        return (2.0 * x.data * np.expand_dims(g, ax),)

    return _make((x.data ** 2).sum(axis=ax), (x,), backward, "squared_norm")


# --- rigid registration --------------------------------------------------------

def procrustes_rotation(m: Tensor, eps: float = 1e-12) -> Tensor:
    """Proper rotation ``R`` maximizing ``trace(R^T M)`` for a 3x3 ``M``.

    With ``M = U S V^T`` this is ``U diag(1, 1, d) V^T`` where ``d`` fixes the
    determinant.  The backward pass solves the Sylvester equation that follows
    from differentiating the symmetry of ``R^T M``.
    """
    if m.shape != (3, 3):
        raise ShapeMismatch(f"procrustes_rotation expects 3x3, got {m.shape}")
    U, S, Vt = np.linalg.svd(m.data)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    V = Vt.T
    lam = np.array([S[0], S[1], d * S[2]])
    denom = lam[:, None] + lam[None, :]
    denom = np.where(np.abs(denom) < eps, eps, denom)

    def backward(g):
        A = V.T @ (R.T @ g) @ V
        B = (A - A.T) / denom
        return (R @ (V @ B @ V.T),)

    return _make(R, (m,), backward, "procrustes")


# --- backward ------------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    if root._stale:
        raise StaleTape("graph was already consumed by a previous backward call")
    if not root.requires_grad:
        return
    nodes = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if id(n) in nodes:
            continue
        if n._stale:
            raise StaleTape("graph was already consumed by a previous backward call")
        nodes[id(n)] = n
        stack.extend(p for p in n._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda n: n._seq, reverse=True)
    grads = {id(root): np.ones(root.shape)}
    for n in order:
        g = grads.pop(id(n), None)
        if n._backward is None:
            if g is not None:
                n.grad = g.copy() if n.grad is None else n.grad + g
            continue
        n._stale = True
        if g is None:
            continue
        for p, gp in zip(n._parents, n._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = gp if k not in grads else grads[k] + gp
        n._backward = None
        n._parents = ()


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-6, indices=None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``x``."""
    flat = x.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(len(idx) if indices is not None else flat.size)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    scale_ = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale_ == 0 else float(np.linalg.norm(a - b) / scale_)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
              max_entries: Optional[int] = None, rng=None) -> float:
    """Relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the graph on each call.  With ``max_entries`` only a
    random subset of each parameter's entries is checked.
    """
    for p in params:
        p.grad = None
    backward(fn())
    analytic, numeric = [], []
    rng = rng or np.random.default_rng(0)
    for p in params:
        g = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, max_entries, replace=False))
        else:
            idx = np.arange(p.size)
        analytic.append(g[idx])
        numeric.append(numeric_grad(fn, p, h, list(idx)))
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))
