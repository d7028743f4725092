"""Dense float64 tensors with tape-based reverse-mode differentiation."""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..core import OdflowError, ShapeMismatch


class NonScalarLoss(OdflowError):
    pass


class NonFiniteDetected(OdflowError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(k for k, s in enumerate(shape) if s == 1 and grad.shape[k] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_owned")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: tuple = (),
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._owned = False

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # the first contribution is stored by reference; it is copied only
        # when a second one has to be added in place
        if self.grad is None:
            self.grad = g
            self._owned = False
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    def _accumulate_at(self, idx, g: np.ndarray) -> None:
        """Add ``g`` into the region ``idx`` of the gradient (basic indexing)."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
            self._owned = True
        elif not self._owned:
            self.grad = np.array(self.grad, dtype=np.float64, copy=True)
            self._owned = True
        self.grad[idx] += g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that stops new nodes from recording the tape."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    req = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = backward_fn
    return out


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), "mul", bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), "relu", bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - y * y))

    return _node(y, (x,), "tanh", bw)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        x._accumulate(g * y * (1.0 - y))

    return _node(y, (x,), "sigmoid", bw)


# -- linear algebra and shape ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        if b.ndim == 2 and a.ndim > 2:
            data = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(g.shape[:-1] + (b.shape[0],))
                a._accumulate(_unbroadcast(ga, a.shape))
            else:
                a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: fold every batch axis into one product
                a2 = a.data.reshape(-1, a.shape[-1])
                b._accumulate(a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(data, (a, b), "matmul", bw)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def bw(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(x.data, -1, -2), (x,), "transpose", bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bw(g):
        x._accumulate(g.reshape(src))

    return _node(x.data.reshape(shape), (x,), "reshape", bw)


def take(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing (``x[idx]``)."""

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis))) for i in items)

    def bw(g):
        if basic:
            x._accumulate_at(idx, g)
        else:
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            x._accumulate(full)

    return _node(x.data[idx], (x,), "slice", bw)


slice_ = take


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in ts]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _node(data, ts, "concat", bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, src))

    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", bw)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _node(np.asarray(x.data.mean()), (x,), "mean", bw)


# -- row-wise normalizations -----------------------------------------------------


def row_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (x,), "row_softmax", bw)


def row_normalize(x: Tensor) -> Tensor:
    """Divide each row by its sum; all-zero rows stay zero with zero gradient."""
    if np.any(x.data < 0):
        raise ValueError("row_normalize needs nonnegative input")
    s = x.data.sum(axis=-1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    y = np.where(s > 0, x.data / safe, 0.0)

    def bw(g):
        dx = (g - (g * y).sum(axis=-1, keepdims=True)) / safe
        x._accumulate(np.where(s > 0, dx, 0.0))

    return _node(y, (x,), "row_normalize", bw)


# -- losses ---------------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over every entry of the squared error."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        if pred.requires_grad:
            pred._accumulate(g * 2.0 * diff / n)
        if target.requires_grad:
            target._accumulate(-g * 2.0 * diff / n)

    return _node(np.asarray(np.mean(diff * diff)), (pred, target), "mse_loss", bw)


# -- reverse sweep ----------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every upstream node."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteDetected(f"non-finite loss {loss.data!r}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        if node is not loss and node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is None and node.grad is not None and not np.isfinite(node.grad).all():
            raise NonFiniteDetected(f"non-finite gradient reached {node.name or node.op}")


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
