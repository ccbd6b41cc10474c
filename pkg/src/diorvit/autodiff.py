"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op builds a node holding its parents and a closure that maps the
output gradient to one gradient per parent. ``backward`` walks the graph in
reverse topological order and accumulates into leaf ``.grad`` buffers.

Only scalars broadcast implicitly. Anything else must go through
``broadcast_to`` so that shape bugs surface at the call site.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NumericDomainError(ArithmeticError):
    """An op was evaluated outside its numeric domain (NaN input, log of <= 0)."""


class GraphError(RuntimeError):
    """backward() was called on something it cannot differentiate."""


_default_dtype: type = np.float32

# op name -> multiplicative factor applied to that op's input gradients.
# Only used by gradient-check negative controls.
_grad_faults: dict[str, float] = {}


def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def inject_grad_fault(op: str, factor: float = 1.01) -> Iterator[None]:
    """Scale the gradient rule of ``op`` by ``factor`` (test hook)."""
    _grad_faults[op] = factor
    try:
        yield
    finally:
        _grad_faults.pop(op, None)


class Tensor:
    """A dense array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, *,
                 _parents: tuple["Tensor", ...] = (), _backward=None, _op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != _default_dtype and not _parents:
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if (requires_grad and not _parents) else None
        self._parents = _parents
        self._backward = _backward
        self.op = _op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, _parents=(), _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, _op=op)


def _check_same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalars broadcast)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar operand of a binary op: collapse the broadcast gradient
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)), "mul")


def elementwise(x, y, op: str) -> Tensor:
    """Binary elementwise op by name: ``add``, ``sub`` or ``mul``."""
    table = {"add": add, "sub": sub, "mul": mul}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](x, y)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),), "scale")


def log(x: Tensor) -> Tensor:
    if np.any(np.isnan(x.data)) or np.any(x.data <= 0):
        raise NumericDomainError(f"log of non-positive value (min={np.nanmin(x.data)!r})")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    # subgradient at 0 is 0 (np.sign(0) == 0)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clip_max(x: Tensor, hi: float) -> Tensor:
    """min(x, hi); gradient is zero where x exceeds hi."""
    mask = x.data <= hi
    return _make(np.minimum(x.data, x.data.dtype.type(hi)), (x,), lambda g: (g * mask,), "clip_max")


def unary(x: Tensor, op: str, c: float | None = None) -> Tensor:
    """Unary op by name: ``log``, ``abs``, ``neg`` or ``scale`` (needs ``c``)."""
    if op == "log":
        return log(x)
    if op == "abs":
        return abs(x)
    if op == "neg":
        return neg(x)
    if op == "scale":
        if c is None:
            raise ValueError("scale needs a constant c")
        return scale(x, c)
    raise ValueError(f"unknown unary op {op!r}")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def activation(x: Tensor, kind: str = "relu", slope: float = 0.01) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes)

    def back(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), back, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)

    def back(g):
        if axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / g.dtype.type(count), x.shape).copy(),)

    return _make(np.asarray(out), (x,), back, "mean")


def reduce(x: Tensor, op: str, axis=None) -> Tensor:
    if op == "sum":
        return sum(x, axis)
    if op == "mean":
        return mean(x, axis)
    raise ValueError(f"unknown reduction {op!r}")


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; the gradient sums back over the expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    expanded = tuple(i for i in range(len(shape))
                     if i < lead or x.shape[i - lead] == 1 and shape[i] != 1)

    def back(g):
        return (g.sum(axis=expanded, keepdims=True).reshape(x.shape),)

    return _make(out.copy(), (x,), back, "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                s != t for i, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if i != axis):
            raise ShapeError(f"concat: shapes {xs[0].shape} and {x.shape} differ off axis {axis}")
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def index(x: Tensor, key) -> Tensor:
    """``x[key]`` for basic or integer-array keys; repeated indices accumulate."""
    out = x.data[key]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), (x,), back, "index")


# ------------------------------------------------------------------ linear alg


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``; ``W`` is ``[in, out]``."""
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    n_in, n_out = W.shape

    def back(g):
        g2 = g.reshape(-1, n_out)
        gx = g @ W.data.T
        gW = x.data.reshape(-1, n_in).T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, back, "linear")


# --------------------------------------------------------------- normalizers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.any(np.isnan(x.data)):
        raise NumericDomainError("softmax: NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.any(np.isnan(x.data)):
        raise NumericDomainError("log_softmax: NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = g.reshape(-1, D)
        gg = (lead * xhat.reshape(-1, D)).sum(axis=0)
        gb = lead.sum(axis=0)
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), back, "layer_norm")


# ------------------------------------------------------------------- backward


def topological_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output`` that need gradients, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every requires-grad leaf's ``.grad``."""
    if not isinstance(output, Tensor):
        raise GraphError("backward() needs a Tensor")
    if output.size != 1:
        raise GraphError(f"backward() needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    order = topological_order(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._backward(g)
        factor = _grad_faults.get(node.op)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if factor is not None:
                pg = pg * factor
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=p.data.dtype)


# ------------------------------------------------------------ gradient check


def numerical_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every coordinate of ``param``."""
    if h <= 0:
        raise ValueError("h must be positive")
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def analytic_grads(f: Callable[[], Tensor], params: Iterable[Tensor]) -> list[np.ndarray]:
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(f())
    return [p.grad.astype(np.float64).copy() for p in params]


def grad_check_groups(f: Callable[[], Tensor], params: dict[str, Tensor],
                      h: float = 1e-6) -> dict[str, float]:
    """Max relative error per named parameter tensor."""
    analytic = analytic_grads(f, params.values())
    report = {}
    for (name, p), a in zip(params.items(), analytic):
        num = numerical_grad(f, p, h)
        report[name] = float(relative_error(a, num).max()) if a.size else 0.0
    return report


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor] | Tensor,
               h: float = 1e-6) -> float:
    """Max over all coordinates of |analytic - numeric| / max(|a|, |n|, 1e-8)."""
    if isinstance(params, Tensor):
        params = [params]
    report = grad_check_groups(f, {str(i): p for i, p in enumerate(params)}, h)
    return max(report.values(), default=0.0)
