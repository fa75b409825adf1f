"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Each op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. The
graph is rebuilt on every forward pass; :func:`backward` walks it once in
reverse topological order. Only leaf tensors created with
``requires_grad=True`` keep gradients, and those accumulate across calls
until :meth:`SgdOptimizer.zero_grads` clears them.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _node(data, parents, backward_fn, op):
    parents = tuple(parents)
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _same_shape(a, b, op):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(grad, shape):
    # only scalar broadcasting is supported
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def relu(x):
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def log(x, eps=0.0):
    """Natural log of ``x + eps``."""
    shifted = x.data + eps
    if np.any(shifted <= 0):
        raise ContractError("log of a non-positive value")
    return _node(np.log(shifted), (x,), lambda g: (g / shifted,), "log")


# -- reductions ------------------------------------------------------------


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(x.shape, np.asarray(g).item()),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(out, (x,), back, "sum")


def mean(x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def pick(x, index):
    """Select ``x[i, index[i]]`` for every row, giving a length-n vector."""
    index = np.asarray(index)
    if x.data.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"pick: matrix {x.shape} with index {index.shape}")
    rows = np.arange(x.shape[0])

    def back(g):
        out = np.zeros_like(x.data)
        out[rows, index] = g
        return (out,)

    return _node(x.data[rows, index], (x,), back, "pick")


# -- linear algebra --------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def add_bias(x, b):
    """Add a per-feature bias: ``[n, f] + [f]`` or per-channel ``[n, c, h, w] + [c]``."""
    if b.data.ndim != 1:
        raise DimensionError(f"add_bias: bias must be 1-D, got {b.shape}")
    if x.data.ndim == 2 and x.shape[1] == b.shape[0]:
        return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    if x.data.ndim == 4 and x.shape[1] == b.shape[0]:
        return _node(x.data + b.data[None, :, None, None], (x, b),
                     lambda g: (g, g.sum(axis=(0, 2, 3))), "add_bias")
    raise DimensionError(f"add_bias: input {x.shape} does not match bias {b.shape}")


def conv2d(x, kernel):
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d: kernel must be 3x3, got {kh}x{kw}")
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # patches[n, cin, 3, 3, h, w]
    patches = np.empty((n, cin, 3, 3, h, w))
    for i in range(3):
        for j in range(3):
            patches[:, :, i, j] = padded[:, :, i:i + h, j:j + w]
    out = np.einsum("ncijhw,ocij->nohw", patches, kernel.data, optimize=True)

    def back(g):
        gk = np.einsum("nohw,ncijhw->ocij", g, patches, optimize=True)
        gpatch = np.einsum("nohw,ocij->ncijhw", g, kernel.data, optimize=True)
        gpad = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                gpad[:, :, i:i + h, j:j + w] += gpatch[:, :, i, j]
        return gpad[:, :, 1:-1, 1:-1], gk

    return _node(out, (x, kernel), back, "conv2d")


def avgpool2d(x, window=2):
    """Non-overlapping mean pooling; trailing rows/columns that do not fill a window are dropped."""
    if x.data.ndim != 4:
        raise DimensionError(f"avgpool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // window, w // window
    if oh == 0 or ow == 0:
        raise DimensionError(f"avgpool2d: input {h}x{w} smaller than window {window}")
    cropped = x.data[:, :, :oh * window, :ow * window]
    out = cropped.reshape(n, c, oh, window, ow, window).mean(axis=(3, 5))

    def back(g):
        full = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, window, axis=2), window, axis=3) / (window * window)
        full[:, :, :oh * window, :ow * window] = spread
        return (full,)

    return _node(out, (x,), back, "avgpool2d")


def global_avgpool(x):
    if x.data.ndim != 4:
        raise DimensionError(f"global_avgpool: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    return _node(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
                 "global_avgpool")


def flatten(x):
    n = x.shape[0]
    return _node(x.data.reshape(n, -1), (x,), lambda g: (g.reshape(x.shape),), "flatten")


# -- softmax family ----------------------------------------------------------


def softmax(logits):
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        # J^T g for J = diag(p) - p p^T, row by row
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (logits,), back, "softmax")


def log_softmax(logits):
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (logits,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


# -- backward pass -------------------------------------------------------------


def graph_nodes(root):
    """Nodes reachable from ``root`` that carry gradient, in topological order."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph_nodes(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE)


class SgdOptimizer:
    """Plain SGD: ``value -= learning_rate * grad``.

    ``weight_decay`` (default 0) adds ``weight_decay * value`` to the
    gradient; with the default the update rule is exactly the plain one.
    """

    def __init__(self, params, learning_rate, weight_decay=0.0):
        if learning_rate < 0:
            raise ContractError(f"learning rate must be non-negative, got {learning_rate}")
        if weight_decay < 0:
            raise ContractError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay

    def step(self):
        for p in self.params:
            if self.weight_decay:
                p.data -= self.learning_rate * (p.grad + self.weight_decay * p.data)
            else:
                p.data -= self.learning_rate * p.grad

    def zero_grads(self):
        for p in self.params:
            p.grad[...] = 0.0
