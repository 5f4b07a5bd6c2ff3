"""Dense float64 tensors with a small reverse-mode autodiff graph.

Every op returns a new Tensor. When any input has ``requires_grad`` the
result records its parents and a closure mapping the output gradient to
one gradient per parent. ``Tensor.backward`` walks that graph in reverse
topological order.

Gradients accumulate: calling ``backward`` twice without ``zero_grad``
adds the second pass on top of the first. Multi-term losses rely on this.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateInputError(ValueError):
    pass


def _check_finite(arr, what="tensor"):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, arr, parents, backward):
        _check_finite(arr, "op output")
        out = cls.__new__(cls)
        out.data = arr
        out._grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic attributes ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        if self.requires_grad and self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def zero_grad(self):
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(node) into ``.grad`` of every upstream
        grad-enabled node (leaves and intermediates alike)."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any grad-enabled tensor")

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._grad is None:
                node._grad = np.array(g, dtype=np.float64)
            else:
                node._grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operators -----------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), back)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise DegenerateInputError("division by zero")
    out = a.data / b.data

    def back(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return Tensor._from_op(out, (a, b), back)


def power(a, exponent):
    exponent = float(exponent)
    out = a.data**exponent

    def back(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor._from_op(out, (a,), back)


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise DegenerateInputError("log of non-positive value")
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    if np.any(a.data < 0):
        raise DegenerateInputError("sqrt of negative value")
    out = np.sqrt(a.data)
    if np.any(out == 0) and a.requires_grad:
        raise DegenerateInputError("sqrt gradient undefined at 0")
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a):
    sign = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def _sigmoid(x):
    # split by sign to stay finite for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    out = np.logaddexp(0.0, a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * _sigmoid(a.data),))


def clip(a, low, high):
    """Hard clip; gradient passes only where the input is inside the range."""
    inside = (a.data >= low) & (a.data <= high)
    return Tensor._from_op(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "abs": abs_,
}


def elementwise(op, *inputs):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*[as_tensor(x) for x in inputs])


# -- linear algebra and structure ----------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), back)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return Tensor._from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(tensors), back)


def getitem(a, index):
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.array(out)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (a,), back)


def take(a, indices, axis=-1):
    """Gather along ``axis``; ``indices`` may be any integer array shape.
    Repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def back(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        # g has indices' dims in place of ``axis``; bring them to the front
        gi = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gi)
        return (full,)

    return Tensor._from_op(out, (a,), back)


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def mse(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return Tensor._from_op(np.asarray((diff * diff).mean()), (a, b), back)


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), back)


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), back)


def softmax_cross_entropy(logits, targets, mask=None):
    """Mean cross-entropy of rows of ``logits`` (M, V) against integer
    ``targets`` (M,). Rows with ``mask == 0`` are excluded from the mean."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy shapes {logits.shape} vs {targets.shape}")
    m = np.ones(len(targets)) if mask is None else np.asarray(mask, dtype=np.float64)
    count = m.sum()
    if count == 0:
        raise DegenerateInputError("cross-entropy over zero unmasked rows")
    ls = log_softmax(logits, axis=1)
    rows = np.arange(len(targets))
    picked = ls.data[rows, targets]
    value = -(picked * m).sum() / count

    def back(g):
        full = np.zeros_like(ls.data)
        full[rows, targets] = -g * m / count
        return (full,)

    return Tensor._from_op(np.asarray(value), (ls,), back)


def l2_normalize(a, axis=-1):
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    out = a.data / norm

    def back(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._from_op(out, (a,), back)


def cosine_similarity(a, b, axis=-1):
    """Cosine similarity along ``axis``; zero-norm inputs are an error."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    return tsum(l2_normalize(a, axis) * l2_normalize(b, axis), axis=axis)


def squared_norm(a, axis=-1):
    return tsum(a * a, axis=axis)


_REDUCTIONS = {
    "sum": tsum,
    "mean": mean,
    "mse": mse,
    "softmax_cross_entropy": softmax_cross_entropy,
    "cosine_similarity": cosine_similarity,
}


def reduction(op, *inputs, **kwargs):
    try:
        fn = _REDUCTIONS[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return fn(*inputs, **kwargs)
