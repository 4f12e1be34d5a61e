"""Small float64 tensor with tape-based reverse-mode differentiation.

Each op records its parents and a closure that maps the output gradient to
parent gradients.  ``backward`` walks the recorded graph in reverse
topological order.  Gradients accumulate until ``zero_grad`` is called.
"""
from __future__ import annotations

import contextlib

import numpy as np


class NumericError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")
    return arr


def _unbroadcast(grad, shape):
    # sum out dimensions that numpy broadcasting expanded
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        arr = np.array(data, dtype=np.float64)
        self.data = _check_finite(arr, _op)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    @staticmethod
    def _make(data, parents, backward, op):
        # op results are fresh arrays, so skip the defensive copy of __init__
        out = Tensor.__new__(Tensor)
        out.data = _check_finite(np.asarray(data, dtype=np.float64), op)
        out.grad = None
        out._op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad, out._parents, out._backward = True, parents, backward
        else:
            out.requires_grad, out._parents, out._backward = False, (), None
        return out

    def backward(self, grad=None):
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        # iterative post-order DFS; long training graphs would overflow recursion
        order, seen = [], set()
        stack = [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._make(a.data + b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._make(a.data * b.data, (a, b),
                            lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, as_tensor(other)
        with np.errstate(all="ignore"):  # non-finite results are reported by the finite check
            out = a.data / b.data
        return Tensor._make(out, (a, b),
                            lambda g: (_unbroadcast(g / b.data, a.shape),
                                       _unbroadcast(-g * out / b.data, b.shape)), "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        with np.errstate(all="ignore"):
            out = a.data ** p
        return Tensor._make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(a.data[idx], (a,), back, "getitem")

    # -- reductions / shape ----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else int(np.prod([self.shape[i] for i in np.atleast_1d(axis)]))
        if n == 0:
            raise ValueError("mean over an empty axis")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    @property
    def T(self):
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: (g.T,), "transpose")

    # -- elementwise functions -------------------------------------------
    def exp(self):
        a = self
        with np.errstate(all="ignore"):
            out = np.exp(a.data)
        return Tensor._make(out, (a,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        with np.errstate(all="ignore"):
            out = np.log(a.data)
        return Tensor._make(out, (a,), lambda g: (g / a.data,), "log")

    def sqrt(self):
        a = self
        with np.errstate(all="ignore"):
            out = np.sqrt(a.data)
        return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")

    def tanh(self):
        a = self
        out = np.tanh(a.data)
        return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")

    def silu(self):
        a = self
        with np.errstate(over="ignore"):
            sig = 1.0 / (1.0 + np.exp(-a.data))
        out = a.data * sig
        return Tensor._make(out, (a,), lambda g: (g * (sig + a.data * sig * (1.0 - sig)),), "silu")

    def log_softmax(self, axis=-1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        soft = np.exp(out)
        return Tensor._make(out, (a,),
                            lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return Tensor._make(a.data @ b.data, (a, b),
                        lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                        lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def reduce_stats(t, axis=None):
    """Mean and population standard deviation along ``axis``.

    ``axis=None`` reduces over every element (scalar statistics).
    """
    t = as_tensor(t)
    n = t.size if axis is None else t.shape[axis]
    if n == 0:
        raise ValueError("reduce_stats over an empty axis")
    mean = t.mean(axis=axis, keepdims=True)
    centered = t - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    v = var.data
    # sqrt has an unbounded slope at 0; constant inputs get std 0 and zero gradient
    safe = np.where(v > 0, v, 1.0)
    std = Tensor._make(np.where(v > 0, np.sqrt(safe), 0.0), (var,),
                       lambda g: (np.where(v > 0, g * 0.5 / np.sqrt(safe), 0.0),), "sqrt")
    out_shape = np.squeeze(mean.data, axis=axis).shape
    return mean.reshape(out_shape), std.reshape(out_shape)


def zero_grad(params):
    for p in params:
        p.grad = None


def param(data):
    return Tensor(data, requires_grad=True)


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def zero_grad(self):
        zero_grad(self.params)


class Adam:
    """Adam with bias correction; state is plain numpy so runs are reproducible."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * p.grad
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * p.grad ** 2
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self):
        zero_grad(self.params)


def make_optimizer(name, params, lr):
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


class MLP:
    """Dense network with SiLU hidden activations and a linear output layer."""

    def __init__(self, sizes, rng, out_scale=1.0):
        self.sizes = list(sizes)
        self.layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(2.0 / n_in)
            if i == len(sizes) - 2:
                scale *= out_scale
            self.layers.append((param(rng.normal(0.0, scale, size=(n_in, n_out))),
                                param(np.zeros((1, n_out)))))

    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def forward(self, x, return_hidden=False):
        x = as_tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        hidden = None
        for i, (W, b) in enumerate(self.layers):
            x = matmul(x, W) + b
            if i < len(self.layers) - 1:
                x = x.silu()
                hidden = x
        if squeeze:
            x = x.reshape(-1)
            hidden = hidden.reshape(-1) if hidden is not None else None
        return (x, hidden) if return_hidden else x

    __call__ = forward

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def state(self, prefix):
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"{prefix}.{i}.W"] = W.data
            out[f"{prefix}.{i}.b"] = b.data
        return out

    @classmethod
    def from_state(cls, arrays, prefix):
        layers, i = [], 0
        while f"{prefix}.{i}.W" in arrays:
            layers.append((param(arrays[f"{prefix}.{i}.W"]), param(arrays[f"{prefix}.{i}.b"])))
            i += 1
        if not layers:
            raise KeyError(f"no layers under {prefix!r}")
        net = cls.__new__(cls)
        net.layers = layers
        net.sizes = [layers[0][0].shape[0]] + [W.shape[1] for W, _ in layers]
        return net
