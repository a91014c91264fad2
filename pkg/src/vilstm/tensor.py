"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation records
its parents and a closure mapping the output gradient to parent gradients;
:meth:`Tensor.backward` replays those closures in reverse topological order.

Broadcasting is deliberately narrow: binary elementwise operations accept two
operands of identical shape, or a scalar (Python number or 0-d tensor) on
either side. Anything else raises :class:`DimensionError`; use
:meth:`Tensor.broadcast_to` to expand explicitly.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, GraphError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate counts per operation kind."""

    def __init__(self) -> None:
        self.by_op: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return int(sum(self.by_op.values()))

    def add(self, op: str, n: int) -> None:
        self.by_op[op] += int(n)


@contextlib.contextmanager
def count_macs():
    """Count MACs of matmul and convolution forwards executed in the block."""
    counter = MacCounter()
    stack = getattr(_local, "counters", [])
    _local.counters = stack + [counter]
    try:
        yield counter
    finally:
        _local.counters = stack


def _count(op: str, n: int) -> None:
    for c in getattr(_local, "counters", ()):
        c.add(op, n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f":
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self._consumed = False

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --------------------------------------------------------------- arithmetic
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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # ----------------------------------------------------------- method sugar
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def logsigmoid(self):
        return logsigmoid(self)

    def silu(self):
        return silu(self)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def broadcast_to(self, shape):
        return broadcast_to(self, tuple(shape))

    def flip(self, axis: int):
        return flip(self, axis)

    def cumsum(self, axis: int):
        return cumsum(self, axis)

    # ---------------------------------------------------------------- autodiff
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() already ran on this graph; rebuild it before calling again")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                    else:
                        node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        self._consumed = True


def _raise_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS; recurrent graphs are too deep for recursion.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


# ----------------------------------------------------------------- elementwise
def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is allowed)")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), back, "div")


def scale(x: Tensor, c: float) -> Tensor:
    return mul(x, c)


def negate(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # Branch-free stable form: exp of a non-positive argument only.
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def logsigmoid(x: Tensor) -> Tensor:
    out = -np.logaddexp(np.zeros((), x.dtype), -x.data)
    return _result(out, (x,), lambda g: (g * _sigmoid(-x.data),), "logsigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1 - s)),), "silu")


def absolute(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties route the gradient to ``a``."""
    a, b = _pair(a, b, "maximum")
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _result(out, (a, b), lambda g: (_unbroadcast(g * take_a, a.shape),
                                           _unbroadcast(g * ~take_a, b.shape)), "maximum")


def where(mask: np.ndarray, a, b) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    a, b = _pair(a, b, "where")
    shape = a.shape if a.ndim else b.shape
    if mask.shape != shape:
        raise DimensionError(f"where: mask shape {mask.shape} does not match {shape}")
    out = np.where(mask, a.data, b.data)
    return _result(out, (a, b), lambda g: (_unbroadcast(g * mask, a.shape),
                                           _unbroadcast(g * ~mask, b.shape)), "where")


_ELEMENTWISE = {
    "add": add, "mul": mul, "sub": sub, "div": div, "exp": exp, "log": log,
    "sigmoid": sigmoid, "logsigmoid": logsigmoid, "silu": silu,
    "maximum": maximum, "negate": negate, "scale": scale, "abs": absolute,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ------------------------------------------------------------------ reductions
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(out), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / n)


# --------------------------------------------------------------------- shaping
def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def back(g):
        z = np.zeros(x.shape, dtype=g.dtype)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result(np.asarray(out), (x,), back, "getitem")


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (duplicates allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def back(g):
        z = np.zeros(x.shape, dtype=g.dtype)
        sl = (slice(None),) * axis + (indices,)
        np.add.at(z, sl, g)
        return (z,)

    return _result(out, (x,), back, "take")


def scatter_rows(values: Tensor, rows, n: int) -> Tensor:
    """Place ``values`` at leading-axis positions ``rows`` of a zero tensor with ``n`` rows."""
    rows = np.asarray(rows, dtype=np.intp)
    if len(rows) != values.shape[0]:
        raise DimensionError(f"scatter_rows: {len(rows)} rows for {values.shape[0]} values")
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    out[rows] = values.data
    return _result(out, (values,), lambda g: (g[rows],), "scatter_rows")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    lead = len(shape) - x.ndim

    def back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(out, (x,), back, "broadcast_to")


def flip(x: Tensor, axis: int) -> Tensor:
    return _result(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis),), "flip")


def cumsum(x: Tensor, axis: int) -> Tensor:
    out = np.cumsum(x.data, axis=axis)
    return _result(out, (x,), lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),), "cumsum")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if any(t.shape != tensors[0].shape for t in tensors):
        raise DimensionError(f"stack: shapes differ {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return _result(out, tensors, lambda g: tuple(np.moveaxis(g, ax, 0)), "stack")


# ---------------------------------------------------------------------- matmul
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]`` with equal batch extents."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _count("matmul", out.size * a.shape[-1])

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with the bias explicitly broadcast over leading axes."""
    y = matmul(x, weight)
    if bias is not None:
        y = y + bias.broadcast_to(y.shape)
    return y


# ------------------------------------------------------------------ layer ops
def layernorm(x: Tensor, gamma: Tensor | None, beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the optional affine ``gamma``/``beta``."""
    d = x.shape[-1]
    for p, nm in ((gamma, "gamma"), (beta, "beta")):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layernorm: {nm} shape {p.shape} does not match last extent {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    lead = tuple(range(x.ndim - 1))
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def back(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result(out.astype(x.dtype, copy=False), parents, back, "layernorm")


def conv2d_depthwise(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Channel-wise 3x3 cross-correlation, zero padding 1, stride 1, on ``x[..., h, w, d]``."""
    if kernel.ndim != 3 or kernel.shape[:2] != (3, 3):
        raise ConfigError(f"conv2d_depthwise needs a 3x3xd kernel, got {kernel.shape}")
    if x.ndim < 3 or x.shape[-1] != kernel.shape[2]:
        raise DimensionError(f"conv2d_depthwise: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[2],):
        raise DimensionError(f"conv2d_depthwise: bias shape {bias.shape}")
    h, w = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for a in range(3):
        for b in range(3):
            out += kernel.data[a, b] * xp[..., a:a + h, b:b + w, :]
    if bias is not None:
        out += bias.data
    _count("conv", out.size * 9)
    lead = tuple(range(x.ndim - 1))
    parents = [x, kernel] + ([bias] if bias is not None else [])

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for a in range(3):
            for b in range(3):
                gxp[..., a:a + h, b:b + w, :] += kernel.data[a, b] * g
                gk[a, b] = (g * xp[..., a:a + h, b:b + w, :]).sum(axis=lead)
        grads = [gxp[..., 1:1 + h, 1:1 + w, :], gk]
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result(out, parents, back, "conv2d_depthwise")


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Channel-wise causal convolution over ``x[..., L, d]``; tap ``K-1`` is the current step."""
    if kernel.ndim != 2 or x.ndim < 2 or kernel.shape[1] != x.shape[-1]:
        raise DimensionError(f"causal_conv1d: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[1],):
        raise DimensionError(f"causal_conv1d: bias shape {bias.shape}")
    K = kernel.shape[0]
    L = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(K - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(K):
        out += kernel.data[j] * xp[..., j:j + L, :]
    if bias is not None:
        out += bias.data
    _count("conv", out.size * K)
    lead = tuple(range(x.ndim - 1))
    parents = [x, kernel] + ([bias] if bias is not None else [])

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for j in range(K):
            gxp[..., j:j + L, :] += kernel.data[j] * g
            gk[j] = (g * xp[..., j:j + L, :]).sum(axis=lead)
        grads = [gxp[..., K - 1:, :], gk]
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result(out, parents, back, "causal_conv1d")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[B, K]``."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    lp = log_softmax(logits)
    rows = np.arange(len(labels))
    return mul(tsum(take_pairs(lp, rows, labels)), -1.0 / len(labels))


def take_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    return getitem(x, (rows, cols))


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
    return float(np.sqrt(total))
