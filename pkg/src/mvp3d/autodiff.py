"""Dense-array computation graph with reverse-mode differentiation.

A :class:`Node` wraps a numpy array. Every op below builds a new node that
remembers its parents and a backward rule; :func:`backward` walks the graph in
reverse topological order. The tape is rebuilt on every forward pass.

Only what the pose network needs is here: elementwise arithmetic with
broadcasting, (batched) matmul, reductions, softmax, layer norm, 2D
convolution, indexing, and an Adam optimizer.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True
# NaN/Inf anywhere in a forward value is treated as an error state
check_finite = True


class GraphError(RuntimeError):
    pass


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("value", "_grad", "parents", "backward_fn", "requires_grad", "op", "name")

    def __init__(self, value, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.value = arr
        self._grad = None
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else np.asarray(g, dtype=self.value.dtype)

    def zero_grad(self):
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Node(op={self.op}, shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

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

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    return Node(x, dtype=dtype)


def parameter(value, name=None) -> Node:
    """A trainable leaf holding its own copy of ``value``."""
    return Node(np.array(value, copy=True), requires_grad=True, name=name)


def _pair(a, b):
    # constants adopt the dtype of the node they meet, so float32 graphs stay float32
    if isinstance(a, Node) and not isinstance(b, Node):
        return a, Node(b, dtype=a.dtype)
    if isinstance(b, Node) and not isinstance(a, Node):
        return Node(a, dtype=b.dtype), b
    return as_node(a), as_node(b)


def _make(value, parents: Sequence[Node], backward_fn, op: str) -> Node:
    if check_finite and not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Node(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class SparseRows:
    """Row-sparse gradient ``(rows, values)`` of a 2-D node, densified lazily."""

    __slots__ = ("shape", "rows", "values")

    def __init__(self, shape, rows, values):
        self.shape = shape
        self.rows = [rows]
        self.values = [values]

    def merge(self, other: "SparseRows") -> "SparseRows":
        self.rows += other.rows
        self.values += other.values
        return self

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values[0].dtype)
        np.add.at(out, np.concatenate(self.rows), np.concatenate(self.values))
        return out


def _accumulate(acc, g):
    if acc is None:
        return g
    if isinstance(acc, SparseRows):
        if isinstance(g, SparseRows):
            return acc.merge(g)
        acc = acc.dense()
    elif isinstance(g, SparseRows):
        g = g.dense()
    return acc + g


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every leaf that requires grad.

    Intermediate nodes get the gradient of this call only; leaves accumulate
    across calls until :meth:`Node.zero_grad`.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(g, SparseRows):
            g = g.dense()
        if not node.parents:
            node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        node._grad = g
        pgrads = node.backward_fn(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = _accumulate(grads.get(key), pg)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Node:
    a, b = _pair(a, b)
    out = a.value / b.value

    def bw(g):
        gb = -g * out / b.value
        return _unbroadcast(g / b.value, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def relu(x) -> Node:
    x = as_node(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Node:
    x = as_node(x)
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x) -> Node:
    x = as_node(x)
    out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Node:
    x = as_node(x)
    return _make(np.log(x.value), (x,), lambda g: (g / x.value,), "log")


def abs_(x) -> Node:
    x = as_node(x)
    return _make(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),), "abs")


def square(x) -> Node:
    x = as_node(x)
    return _make(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,), "square")


def pow_(x, p: float) -> Node:
    x = as_node(x)
    return _make(x.value**p, (x,), lambda g: (g * p * x.value ** (p - 1),), "pow")


def clip(x, lo, hi) -> Node:
    """Clamp elementwise; gradient passes only where the value was inside."""
    x = as_node(x)
    lo = np.asarray(lo, dtype=x.dtype)
    hi = np.asarray(hi, dtype=x.dtype)
    inside = (x.value >= lo) & (x.value <= hi)
    return _make(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,), "clip")


def where(mask, a, b) -> Node:
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _make(np.where(mask, a.value, b.value), (a, b), bw, "where")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Node:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Node:
    """``x @ w + b`` with the bias broadcast over leading axes."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


# ---------------------------------------------------------------- reductions & shape


def sum_(x, axis=None, keepdims=False) -> Node:
    x = as_node(x)
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Node:
    x = as_node(x)
    n = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Node:
    x = as_node(x)
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Node:
    x = as_node(x)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence, axis=0) -> Node:
    xs = [as_node(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.value for x in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence, axis=0) -> Node:
    xs = [as_node(x) for x in xs]
    return concat([reshape(x, np.expand_dims(x.value, axis).shape) for x in xs], axis=axis)


def getitem(x, idx) -> Node:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    x = as_node(x)

    def bw(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.value[idx], (x,), bw, "getitem")


def take_rows(x, rows) -> Node:
    """``x[rows]`` for a 2-D node and an integer index array; sparse backward."""
    x = as_node(x)
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)

    def bw(g):
        return (SparseRows(x.shape, rows, g),)

    return _make(x.value[rows], (x,), bw, "take_rows")


def broadcast_to(x, shape) -> Node:
    x = as_node(x)
    return _make(np.broadcast_to(x.value, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


# ---------------------------------------------------------------- composite ops


def softmax(x, axis=-1) -> Node:
    x = as_node(x)
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layernorm(x, gamma, beta, eps=1e-5) -> Node:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value
    d = x.shape[-1]

    def bw(g):
        gxhat = g * gamma.value
        gx = inv / d * (d * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), bw, "layernorm")


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Node:
    """Cross-correlation of ``x[C_in,H,W]`` with ``w[C_out,C_in,kh,kw]``."""
    x, w = as_node(x), as_node(w)
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError("conv2d kernel larger than padded input")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError(f"conv2d output extent is not an integer for stride {stride}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    if kh == 1 and kw == 1 and pad == 0 and stride == 1:
        wm = w.value.reshape(cout, cin)
        xm = x.value.reshape(cin, h * wd)
        out = (wm @ xm).reshape(cout, ho, wo)

        def bw1(g):
            gm = g.reshape(cout, h * wd)
            return (wm.T @ gm).reshape(x.shape), (gm @ xm.T).reshape(w.shape)

        node = _make(out, (x, w), bw1, "conv2d")
    else:
        xp = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad))) if pad else x.value
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        # win: [C_in, Ho, Wo, kh, kw]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
        wm = w.value.reshape(cout, cin * kh * kw)
        out = (wm @ cols).reshape(cout, ho, wo)

        def bw(g):
            gm = g.reshape(cout, ho * wo)
            gw = (gm @ cols.T).reshape(w.shape)
            gcols = (wm.T @ gm).reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, pad : pad + h, pad : pad + wd] if pad else gxp
            return gx, gw

        node = _make(out, (x, w), bw, "conv2d")
    if b is not None:
        node = add(node, reshape(b, (cout, 1, 1)))
    return node


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction. ``lr`` may be changed between steps."""

    def __init__(self, params: Iterable[Node], lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            p.value = adam_step(p.value, p.grad, self.m[i], self.v[i], self.t,
                                self.lr, self.beta1, self.beta2, self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.m = [np.array(m, dtype=p.dtype) for m, p in zip(state["m"], self.params)]
        self.v = [np.array(v, dtype=p.dtype) for v, p in zip(state["v"], self.params)]


def adam_step(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update. ``m`` and ``v`` are updated in place; returns the new value."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    return value - lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------- checking


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h=1e-5, index=None) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = range(arr.size) if index is None else index
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in it:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor=1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
