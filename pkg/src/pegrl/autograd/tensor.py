"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor is simultaneously the value and the graph node: it records the
operation tag that produced it, references to its parent tensors, and a
gradient accumulator of the same shape as its value. backward() walks the
graph once in reverse topological order; a node feeding several consumers
accumulates (sums) every incoming contribution before its own rule runs.

Values are float32 in training and float64 inside gradient checks; an op
never mixes the two. Strict finite checking (NaN/Inf rejection at op
boundaries) is enabled through set_strict_finite() and is on in the test
suite; leaf construction through tensor() always validates.
"""

import numpy as np

from pegrl.errors import DimensionError, NumericError, UsageError

_STRICT_FINITE = False


def set_strict_finite(flag):
    """Globally enable/disable finite checks on every op output."""
    global _STRICT_FINITE
    _STRICT_FINITE = bool(flag)


def strict_finite_enabled():
    return _STRICT_FINITE


def check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in {where}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.op = op
        if _STRICT_FINITE:
            check_finite(data, f"output of op '{op}'")

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

    def item(self):
        return float(self.data)

    def detach(self):
        """Same value, cut from the graph."""
        return Tensor(self.data, requires_grad=False, op="detach")

    def accumulate_grad(self, g, own=False):
        """Add an incoming gradient contribution. own=True promises g is a
        freshly-allocated array the caller will not reuse, letting the first
        contribution be adopted without a defensive copy."""
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != value shape {self.data.shape} in op '{self.op}'")
        if self.grad is None:
            if own and g.dtype == self.data.dtype and g.base is None:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate gradients to every reachable tensor with requires_grad."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        order = _topo_order(self)
        self.grad = grad.reshape(self.data.shape).copy()
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node is not self and node._backward is not None:
                # interior activations: free the accumulator once consumed
                node.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _topo_order(root):
    """Reverse topological order (root first), iterative to spare the stack."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited and (p.requires_grad or p.parents):
                stack.append((p, False))
    order.reverse()
    return order


class Parameter(Tensor):
    """Learnable leaf tensor with a unique name for serialization."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        data = np.asarray(data)
        super().__init__(data, requires_grad=True, op="parameter")
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def tensor(data, requires_grad=False, dtype=None):
    """Wrap external data as a leaf; always validates finiteness."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    check_finite(arr, "leaf tensor")
    return Tensor(arr, requires_grad=requires_grad)


def collect_parameters(*groups):
    """Flatten parameter containers, enforcing unique names."""
    out = []
    seen = set()
    for g in groups:
        for p in g:
            if p.name in seen:
                raise UsageError(f"duplicate parameter name {p.name!r}")
            seen.add(p.name)
            out.append(p)
    return out
