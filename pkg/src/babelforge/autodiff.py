"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the Transformer needs are provided, each with its
backward rule.  Training runs in float32; float64 tensors exist so gradients
can be checked against central finite differences.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class AutodiffError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, dtype=as_tensor(a).dtype)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, dtype=as_tensor(a).dtype)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, dtype=as_tensor(a).dtype)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                 lambda g: (g * mask,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


# -- linear algebra / shape --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    # stacked @ matrix is flattened into one GEMM; numpy would loop the stack
    flat = b.ndim == 2 and a.ndim > 2

    def backward_fn(g):
        if flat:
            k, n = b.shape
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    if flat:
        out = (np.ascontiguousarray(a.data).reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[1])
    else:
        out = a.data @ b.data
    return _make(out, (a, b), backward_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_rows(a: Tensor, index) -> Tensor:
    """Basic-slicing view along leading axes, e.g. ``x[:, :n]``."""
    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)
    return _make(a.data[index], (a,), backward_fn)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)
    return _make(weight.data[ids], (weight,), backward_fn)


# -- normalization / nonlinearity ------------------------------------------------

def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def backward_fn(g):
        gxhat = g * weight.data
        n = x.shape[-1]
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx.astype(x.dtype, copy=False), (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _make(out.astype(x.dtype, copy=False), (x, weight, bias), backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, (x,), backward_fn)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity outside training or at p == 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise AutodiffError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy(logits: Tensor, targets, label_smoothing: float = 0.0, pad_id: int = 0) -> Tensor:
    """Token-mean label-smoothed negative log-likelihood over non-pad rows.

    Per row: (1 - eps) * NLL(target) + eps * mean over the vocabulary of NLL.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    z = logits.data.reshape(-1, logits.shape[-1])
    if z.shape[0] != targets.shape[0]:
        raise AutodiffError(f"{z.shape[0]} logit rows for {targets.shape[0]} targets")
    keep = targets != pad_id
    n = int(keep.sum())
    if n == 0:
        raise AutodiffError("cross entropy over an all-pad target")
    V = z.shape[1]
    if targets.max() >= V or targets.min() < 0:
        raise AutodiffError("target id outside the logit range")
    eps = label_smoothing
    lsm = log_softmax_np(z.astype(np.float64) if z.dtype == np.float64 else z)
    rows = np.flatnonzero(keep)
    nll = -lsm[rows, targets[rows]]
    smooth = -lsm[rows].mean(axis=1)
    loss = ((1.0 - eps) * nll + eps * smooth).sum() / n

    def backward_fn(g):
        p = np.exp(lsm[rows])
        grad_rows = p - eps / V
        grad_rows[np.arange(rows.size), targets[rows]] -= 1.0 - eps
        full = np.zeros_like(z)
        full[rows] = grad_rows * (g / n)
        return (full.reshape(logits.shape).astype(logits.dtype, copy=False),)
    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn)


# -- backward ----------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    With ``params`` given, unreachable ones get zero gradients and the list of
    gradients is returned.  A graph can be walked once.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise AutodiffError("backward already called on this graph; rebuild it first")
    if loss.requires_grad:
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node._parents = ()
            node._backward = None
    loss._consumed = True
    if params is None:
        return None
    out = []
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
