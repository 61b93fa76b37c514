"""Dense-tensor reverse-mode autodiff on top of numpy.

Graphs are built on the fly (define-by-run): every op returns a new
:class:`Tensor` holding references to its parents and a closure that maps the
upstream gradient to parent gradients. :func:`backward` walks the graph in
reverse topological order.

Broadcasting is deliberately restricted to scalar-with-tensor and equal
shapes. Anything else (row-vector shifts, gathers, shifts) has a named op so
that each gradient rule can be read on its own.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

DTYPE = np.float64

# NaN/Inf propagate, so checking the loss and the leaf gradients catches them;
# CHECK_EVERY_OP pinpoints the producing op at the cost of one pass per op.
CHECK_FINITE = True
CHECK_EVERY_OP = False


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable n-d array node in a computation graph."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, parents=(), backward_fn=None, op: str = "leaf",
                 _owned: bool = False):
        if _owned and isinstance(data, np.ndarray) and data.dtype == DTYPE:
            arr = data
        else:
            arr = np.array(data, dtype=DTYPE, copy=True)
        if arr.flags.writeable:
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self.backward_fn: BackwardFn | None = backward_fn
        self.op = op

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
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(value: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap a freshly computed value as a graph node.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent, each
    with the parent's shape. Parents that do not require gradients are kept out
    of the graph entirely.
    """
    value = np.asarray(value, dtype=DTYPE)
    if CHECK_EVERY_OP and not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op, _owned=True)
    return Tensor(value, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op, _owned=True)


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.ndim == 0
    return np.ndim(x) == 0


def _binary_operands(a, b, name: str):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are neither equal nor scalar")
    return a, b


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return make_op(
        a.data + b.data, (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return make_op(
        a.data - b.data, (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return make_op(
        a.data * b.data, (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
        "mul",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = np.ascontiguousarray(a.data).reshape(-1)
    y = kernels.gelu_forward(x).reshape(a.shape)
    return make_op(y, (a,), lambda g: (kernels.gelu_backward(x, np.ascontiguousarray(g).reshape(-1)).reshape(a.shape),),
                   "gelu")


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``gelu`` or ``tanh``."""
    table = {"add": add, "sub": sub, "mul": mul, "gelu": gelu, "tanh": tanh}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def scale_shift(a, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """``a * scale + shift`` with constant (non-differentiable) scale/shift.

    The constants broadcast against the trailing axes of ``a`` (e.g. one value
    per column); the output always has ``a``'s shape.
    """
    a = as_tensor(a)
    scale = np.asarray(scale, dtype=DTYPE)
    shift = np.asarray(shift, dtype=DTYPE)
    y = a.data * scale + shift
    if y.shape != a.shape:
        raise ShapeError(f"scale_shift: constants would change shape {a.shape} -> {y.shape}")
    return make_op(y, (a,), lambda g: (g * scale,), "scale_shift")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports ``[m,k] @ [k,n]``, stacked products with identical leading dims
    ``[...,m,k] @ [...,k,n]``, and the linear-layer case ``[...,m,k] @ [k,n]``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        y = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*lead, b.shape[-1])

        def bw(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return make_op(y, (a, b), bw, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    y = a.data @ b.data

    def bw_batched(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_op(y, (a, b), bw_batched, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return make_op(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    y = a.data.sum(axis=axis)
    return make_op(y, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilised by subtracting the max."""
    a = as_tensor(a)
    moved = np.moveaxis(a.data, axis, -1)
    y = kernels.softmax_forward(_rows(moved))

    def bw(g):
        gm = _rows(np.moveaxis(g, axis, -1))
        return (np.moveaxis(kernels.softmax_backward(y, gm).reshape(moved.shape), -1, axis),)

    return make_op(np.moveaxis(y.reshape(moved.shape), -1, axis), (a,), bw, "softmax")


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("softmax_rows expects a matrix")
    return softmax(a, axis=-1)


LN_EPS = 1e-5


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise ShapeError("layer_norm needs at least 2 features")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({n},)")
    y, xhat, rstd = kernels.layer_norm_forward(_rows(x.data), gain.data, bias.data, eps)

    def bw(g):
        gx, ggain, gbias = kernels.layer_norm_backward(_rows(g), xhat, rstd, gain.data)
        return (gx.reshape(x.shape) if x.requires_grad else None,
                ggain if gain.requires_grad else None,
                gbias if bias.requires_grad else None)

    return make_op(y.reshape(x.shape), (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# indexing


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    y = a.data[key]
    shape = a.shape

    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis)))
                for k in (key if isinstance(key, tuple) else (key,)))

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return make_op(np.array(y), (a,), bw, "getitem")


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Rows ``a[index]`` of a matrix; negative indices produce zero rows."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    y = np.zeros((len(index),) + a.shape[1:], dtype=DTYPE)
    y[valid] = a.data[index[valid]]
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index[valid], g[valid])
        return (out,)

    return make_op(y, (a,), bw, "gather_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    y = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_op(y, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# backward


class Gradients(dict):
    """Map from leaf tensors to gradients; unknown tensors read as zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros(key.shape, dtype=DTYPE)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its parents."""
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed: np.ndarray | None = None) -> Gradients:
    """Reverse-mode sweep from ``loss``.

    ``loss`` must be a scalar unless an explicit upstream ``seed`` of the same
    shape is given (used for chunked vector-Jacobian products).
    Returns gradients for every ``requires_grad`` leaf that the loss depends on;
    other tensors read as zeros from the returned mapping.
    """
    if seed is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones(loss.shape, dtype=DTYPE)
    else:
        seed = np.asarray(seed, dtype=DTYPE)
        if seed.shape != loss.shape:
            raise ShapeError("seed shape must match the output shape")
    if CHECK_FINITE and not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    out = Gradients()
    if not loss.requires_grad:
        return out
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if CHECK_FINITE and not np.isfinite(g).all():
                raise NonFiniteError("non-finite gradient reached a leaf")
            out[node] = g
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    grads = backward(loss)
    return [grads[t] for t in wrt]


def numerical_grad(fn: Callable[[], float], param: np.ndarray, step: float = 1e-5, index=None) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. entries of ``param`` (mutated in place and restored).

    ``index`` optionally restricts the probe to a list of flat indices; other
    entries of the result are left at zero.
    """
    flat = param.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if index is None else index
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(param.shape)
