"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward op records its parents and a backward closure on the result
node; calling :func:`backward` on a scalar replays the closures in reverse
topological order. The engine is deliberately small: 2-D matrices plus an
optional leading batch axis, float64 only, no views, no in-place forward
ops. Forward computation is pure, so separate graphs can live on separate
threads; a single graph must stay on one thread.

Gradients accumulate. A tensor created with ``requires_grad=True`` owns a
zero-filled ``grad`` buffer from birth; repeated ``backward`` calls keep
adding into it until ``zero_grad`` is called.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "GradError",
    "constant",
    "matmul",
    "transpose",
    "softmax_rows",
    "swish",
    "abs_",
    "maximum",
    "concat_cols",
    "mean_rows",
    "max_rows",
    "sort_cols",
    "sum_all",
    "mean_all",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class GradError(RuntimeError):
    """Misuse of the backward machinery (e.g. backward on a non-scalar)."""


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 3:
        raise ShapeError(f"tensors are limited to rank <= 3, got rank {arr.ndim}")
    return arr


class Tensor:
    """A float64 array plus the autodiff bookkeeping attached to it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_array(values)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped without gradient tracking
    def __add__(self, other):
        return _add(self, _wrap(other))

    def __radd__(self, other):
        return _add(_wrap(other), self)

    def __sub__(self, other):
        return _sub(self, _wrap(other))

    def __rsub__(self, other):
        return _sub(_wrap(other), self)

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    def __rmul__(self, other):
        return _mul(_wrap(other), self)

    def __neg__(self):
        return _mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named leaf tensor; its value always tracks gradients.

    Name uniqueness is the owning model's responsibility, as is
    deterministic seeded initialization.
    """

    __slots__ = ("name", "value")

    def __init__(self, name: str, values):
        self.name = name
        self.value = Tensor(values, requires_grad=True)

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def constant(values) -> Tensor:
    """Wrap raw values as a non-tracked tensor."""
    return Tensor(values, requires_grad=False)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.grad = np.zeros_like(data)
        out._parents = parents
        out._backward = backward_fn
    else:
        out.grad = None
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += _unbroadcast(grad, t.data.shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def _broadcast_result(a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        if op == "add":
            return a.data + b.data
        if op == "sub":
            return a.data - b.data
        return a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def _add(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_result(a, b, "add")

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(data, (a, b), backward_fn)


def _sub(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_result(a, b, "sub")

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(data, (a, b), backward_fn)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    data = _broadcast_result(a, b, "mul")

    def backward_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(data, (a, b), backward_fn)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = _wrap(a), _wrap(b)
    data = np.maximum(a.data, b.data)
    take_a = a.data >= b.data

    def backward_fn(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)

    return _node(data, (a, b), backward_fn)


def abs_(x: Tensor) -> Tensor:
    """Elementwise absolute value; the subgradient at 0 is 0."""
    sign = np.sign(x.data)

    def backward_fn(g):
        _accumulate(x, g * sign)

    return _node(np.abs(x.data), (x,), backward_fn)


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x), with an overflow-free sigmoid."""
    d = x.data
    sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    data = d * sig

    def backward_fn(g):
        _accumulate(x, g * (sig * (1.0 + d * (1.0 - sig))))

    return _node(data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported operand ranks: (2,2), (3,2) with the 2-D weight on the
    right, and (3,3) with matching batch size. Inner dimensions must agree.
    """
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    ra, rb = a.data.ndim, b.data.ndim
    if (ra, rb) == (2, 3):
        raise ShapeError("matmul: 2-D left with 3-D right is not supported")
    if ra == 3 and rb == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"matmul: batch sizes disagree, {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a.grad += g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if rb == 2 and gb.ndim == 3:
                gb = gb.sum(axis=0)
            b.grad += gb

    return _node(data, (a, b), backward_fn)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def backward_fn(g):
        _accumulate(x, np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(x.data, -1, -2), (x,), backward_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        # ds/dx through softmax: s * (g - <g, s>)
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(x, s * (g - inner))

    return _node(s, (x,), backward_fn)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat_cols: leading shapes disagree, {a.shape} vs {b.shape}")
    na = a.data.shape[-1]

    def backward_fn(g):
        _accumulate(a, g[..., :na])
        _accumulate(b, g[..., na:])

    return _node(np.concatenate([a.data, b.data], axis=-1), (a, b), backward_fn)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the row axis: (B, T, F) -> (B, F), (T, F) -> (1, F).

    Divides by the full row count, padded rows included.
    """
    t = x.data.shape[-2]
    data = x.data.mean(axis=-2)
    if data.ndim == 1:
        data = data.reshape(1, -1)

    def backward_fn(g):
        _accumulate(x, np.repeat(np.expand_dims(g / t, -2), t, axis=-2))

    return _node(data, (x,), backward_fn)


def max_rows(x: Tensor) -> Tensor:
    """Max over the row axis; ties route the gradient to the first row."""
    idx = x.data.argmax(axis=-2)
    data = x.data.max(axis=-2)
    if data.ndim == 1:
        data = data.reshape(1, -1)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, -2),
                          g.reshape(np.expand_dims(idx, -2).shape), axis=-2)
        _accumulate(x, gx)

    return _node(data, (x,), backward_fn)


def sort_cols(x: Tensor) -> Tensor:
    """Sort each row ascending; the gradient follows the permutation."""
    order = np.argsort(x.data, axis=-1, kind="stable")
    data = np.take_along_axis(x.data, order, axis=-1)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, order, g, axis=-1)
        _accumulate(x, gx)

    return _node(data, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a 1x1 tensor."""

    def backward_fn(g):
        _accumulate(x, np.full_like(x.data, g.reshape(())))

    return _node(np.array([[x.data.sum()]]), (x,), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    """Mean of all entries, as a 1x1 tensor."""
    n = x.data.size

    def backward_fn(g):
        _accumulate(x, np.full_like(x.data, g.reshape(()) / n))

    return _node(np.array([[x.data.mean()]]), (x,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate gradients of every tensor reachable from ``loss``.

    ``loss`` must be a 1x1 scalar produced by recorded ops. Leaf gradients
    add into existing buffers, so repeated calls accumulate one pass each;
    call ``zero_grad`` between steps. Interior-node gradients are reset at
    the start of every pass.
    """
    if loss.data.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in topo:
        if node._parents:
            node.grad[...] = 0.0
    if loss._parents:
        loss.grad[...] = 1.0
    else:
        loss.grad += 1.0
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
