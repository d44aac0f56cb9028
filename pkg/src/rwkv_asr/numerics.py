"""Taped reverse-mode differentiation over numpy arrays.

Every operation records its inputs and a closure mapping the output
gradient to input gradients; :func:`backward` replays the tape in reverse
topological order.  Tensors are treated as immutable once created.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "tensor",
    "sentinel",
    "matmul",
    "linear",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "abs_",
    "squared_relu",
    "logsumexp",
    "log_softmax",
    "softmax",
    "logaddexp",
    "where",
    "scatter",
    "stack",
    "concat",
    "dropout",
    "layer_norm",
    "backward",
    "numerical_grad",
    "max_rel_error",
]

DTYPES = {"f32": np.float32, "f64": np.float64}


class GraphError(RuntimeError):
    """Raised when backward is requested on something that is not a recorded loss."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def sentinel(dtype) -> float:
    """Most negative finite value of ``dtype``; stands in for log(0)."""
    return float(np.finfo(dtype).min)


def _check(data: np.ndarray, op: str) -> None:
    # min/max propagate NaN and expose +-Inf without a boolean temporary
    if data.size and not (np.isfinite(data.min()) and np.isfinite(data.max())):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(dtype, str):
            dtype = DTYPES[dtype]
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_lift(other, self)))

    def __rsub__(self, other):
        return _add(_lift(other, self), _neg(self))

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return _div(_lift(other, self), self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, p: float):
        return _pow(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    # -- shape ops ----------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def bw(g):
            return (g.reshape(old),)

        return _record(self.data.reshape(shape), (self,), bw, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))

        def bw(g):
            return (g.transpose(inv),)

        return _record(self.data.transpose(axes), (self,), bw, "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _record(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))


def tensor(data, dtype="f64", requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _record(data: np.ndarray, parents: tuple, bw: Callable, op: str) -> Tensor:
    data = np.asarray(data)
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = bw
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- elementwise primitives ----------------------------------------------------
def _add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), bw, "add")


def _neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def _mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bw, "mul")


def _div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), bw, "div")


def _pow(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def bw(g):
        return (g * p * ad ** (p - 1),)

    return _record(ad**p, (a,), bw, "pow")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _record(out, (x,), lambda g: (g / xd,), "log")


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow for large |x|."""
    xd = x.data
    z = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(xd.dtype, copy=False)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def squared_relu(x: Tensor) -> Tensor:
    r = np.maximum(x.data, 0)
    return _record(r * r, (x,), lambda g: (g * 2 * r,), "squared_relu")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    like = a if isinstance(a, Tensor) else b
    a, b = _lift(a, like), _lift(b, like)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0), sa), _unbroadcast(np.where(cond, 0, g), sb)

    return _record(np.where(cond, a.data, b.data), (a, b), bw, "where")


# -- reductions / normalizers --------------------------------------------------
def _clamp_sentinel(xd: np.ndarray) -> np.ndarray:
    return np.maximum(xd, sentinel(xd.dtype))


def logsumexp(x: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp; -inf inputs are absorbed as the sentinel."""
    xd = _clamp_sentinel(x.data)
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    w = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return _record(res, (x,), bw, "logsumexp")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    sh = xd - m
    lse = np.log(np.exp(sh).sum(axis=axis, keepdims=True))
    out = sh - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), bw, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw, "softmax")


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise log(e^a + e^b) with sentinel absorption."""
    ad, bd = _clamp_sentinel(a.data), _clamp_sentinel(b.data)
    m = np.maximum(ad, bd)
    ea, eb = np.exp(ad - m), np.exp(bd - m)
    s = ea + eb
    out = m + np.log(s)
    wa, wb = ea / s, eb / s

    def bw(g):
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)

    return _record(out, (a, b), bw, "logaddexp")


# -- linear algebra --------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T (+ bias)`` for a weight stored as (out, in)."""
    y = matmul(x, weight.T) if x.ndim >= 2 else matmul(x.reshape(1, -1), weight.T).reshape(-1)
    return y if bias is None else y + bias


# -- indexing / structure ----------------------------------------------------------
def _getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record(np.asarray(x.data[index]), (x,), bw, "getitem")


def scatter(src: Tensor, index: tuple, shape: tuple) -> Tensor:
    """Place ``src`` at ``index`` of a zero array of ``shape``; indices must be unique."""
    full = np.zeros(shape, dtype=src.dtype)
    full[index] = src.data
    return _record(full, (src,), lambda g: (g[index],), "scatter")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _record(np.stack([x.data for x in xs], axis=axis), xs, bw, "stack")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + eps) ** -0.5 * gain + bias


# -- reverse pass ----------------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Propagate d(loss)/d(.) to every leaf that requires grad.

    Leaf gradients are written to ``.grad`` (overwriting).  When ``params``
    is given, their gradients are also returned in order, with exact zeros
    for parameters that did not take part in the forward pass.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("loss must be a Tensor produced by a forward pass")
    if loss.data.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss has no recorded dependence on any parameter; run a forward pass first")
    params = list(params) if params is not None else None
    if params is not None:
        for p in params:
            p.grad = None
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def numerical_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` wrt every entry of ``param``."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f().data)
        flat[i] = old - h
        fm = float(f().data)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(param.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
