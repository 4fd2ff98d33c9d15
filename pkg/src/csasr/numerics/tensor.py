"""Dense ndarray-backed tensors with tape-free reverse-mode differentiation.

Each op records its parents and a closure mapping the output gradient to
one gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order and deposits gradients on leaf tensors only.
"""

import contextlib

import numpy as np

from ..errors import ContractError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_array(x, dtype=None):
    if isinstance(x, np.ndarray):
        if dtype is not None and x.dtype != dtype:
            return x.astype(dtype)
        if not np.issubdtype(x.dtype, np.floating):
            return x.astype(np.float64)
        return x
    return np.asarray(x, dtype=dtype or np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # -- introspection ---------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- differentiation -------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``.

        ``self`` must hold a single value unless ``grad`` is supplied.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (unbroadcast(g, a), unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        a, b = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data,
            (self, other),
            lambda g: (unbroadcast(g, a), unbroadcast(-g, b)),
        )

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        x, y = self.data, other.data
        return Tensor._from_op(
            x * y,
            (self, other),
            lambda g: (unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        x, y = self.data, other.data
        return Tensor._from_op(
            x / y,
            (self, other),
            lambda g: (
                unbroadcast(g / y, x.shape),
                unbroadcast(-g * x / (y * y), y.shape),
            ),
        )

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise ContractError("only constant exponents are supported")
        x = self.data
        return Tensor._from_op(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        other = _wrap(other)
        x, y = self.data, other.data

        def back(g):
            gx = g @ np.swapaxes(y, -1, -2) if y.ndim > 1 else np.multiply.outer(g, y)
            gy = np.swapaxes(x, -1, -2) @ g if x.ndim > 1 else np.multiply.outer(x, g)
            return unbroadcast(gx, x.shape), unbroadcast(gy, y.shape)

        return Tensor._from_op(x @ y, (self, other), back)

    def __rmatmul__(self, other):
        return _wrap(other) @ self

    # -- unary -----------------------------------------------------------
    def exp(self):
        y = np.exp(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g / (2 * y),))

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * (1 - y * y),))

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back
        )

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- shape -----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._from_op(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),)
        )

    def swapaxes(self, a, b):
        return Tensor._from_op(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            idx = idx.data
        shape, dtype = self.shape, self.data.dtype

        def back(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._from_op(self.data[idx], (self,), back)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _topological(root):
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def check_same_shape(a, b, what):
    if tuple(a) != tuple(b):
        raise ShapeError(f"{what}: shape {tuple(a)} does not match {tuple(b)}")
