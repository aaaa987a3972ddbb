"""Small reverse-mode automatic differentiation engine on top of numpy.

Every operation returns a new :class:`DenseArray` that remembers its operands
and a closure computing the operand adjoints.  Calling :meth:`DenseArray.backward`
on a scalar walks that graph in reverse topological order (the tape) and
accumulates ``grad`` on every leaf created with ``requires_grad=True``.

All arithmetic is float64.  There is no global state: each graph belongs to
whoever built it, so independent training runs never share anything.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ContractViolation",
    "DenseArray",
    "Adam",
    "SGD",
    "add",
    "concat",
    "conv2d",
    "cross_entropy",
    "exp",
    "global_avg_pool",
    "log",
    "matmul",
    "mean",
    "mse",
    "reshape",
    "relu",
    "scale",
    "softmax_rows",
    "sum",
    "tanh",
    "transpose",
    "upsample2x_nearest",
]

_TINY = np.finfo(np.float64).tiny


class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented preconditions."""


class DenseArray:
    """A float64 array that participates in gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[DenseArray, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._spent = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["DenseArray", ...], backward, op: str) -> "DenseArray":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._spent = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"DenseArray(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {self.shape}")
        if self._spent:
            raise ContractViolation("backward already ran on this graph; rebuild the forward pass first")
        if not self.requires_grad:
            raise ContractViolation("loss does not depend on any array with requires_grad=True")

        order: list[DenseArray] = []
        seen: set[int] = set()
        stack: list[tuple[DenseArray, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node._spent:
                raise ContractViolation("graph was already consumed by an earlier backward call")
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        adjoints: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in adjoints:
                        adjoints[key] = adjoints[key] + pg
                    else:
                        adjoints[key] = pg
            node._spent = True
            node._parents = ()
            node._backward = None


def _as_array(x) -> DenseArray:
    return x if isinstance(x, DenseArray) else DenseArray(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> DenseArray:
    a, b = _as_array(a), _as_array(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return DenseArray._result(A @ B, (a, b), back, "matmul")


def transpose(a) -> DenseArray:
    a = _as_array(a)
    if a.data.ndim != 2:
        raise ContractViolation(f"transpose: expected a matrix, got shape {a.shape}")
    return DenseArray._result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: Sequence[int]) -> DenseArray:
    a = _as_array(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return DenseArray._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(arrays: Sequence, axis: int = 1) -> DenseArray:
    arrays = [_as_array(x) for x in arrays]
    try:
        out = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in arrays)
        raise ContractViolation(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return DenseArray._result(out, tuple(arrays), back, "concat")


# -- elementwise ------------------------------------------------------------


def add(a, b) -> DenseArray:
    """Elementwise sum; ``b`` may broadcast over the leading axes of ``a`` (biases)."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        trailing = a.shape[a.data.ndim - b.data.ndim:] if b.data.ndim <= a.data.ndim else None
        if trailing != b.shape:
            raise ContractViolation(f"add: shapes {a.shape} and {b.shape} do not match")
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return DenseArray._result(a.data + b.data, (a, b), back, "add")


def scale(a, factor: float) -> DenseArray:
    a = _as_array(a)
    factor = float(factor)
    return DenseArray._result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def tanh(a) -> DenseArray:
    a = _as_array(a)
    t = np.tanh(a.data)
    return DenseArray._result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a) -> DenseArray:
    a = _as_array(a)
    mask = a.data > 0
    return DenseArray._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> DenseArray:
    a = _as_array(a)
    e = np.exp(a.data)
    return DenseArray._result(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> DenseArray:
    """Natural log.  Zeros are clamped to the smallest normal float so the result stays finite."""
    a = _as_array(a)
    if a.data.size == 0:
        raise ContractViolation("log: empty operand")
    if np.any(a.data < 0):
        raise ContractViolation("log: negative operand")
    x = np.maximum(a.data, _TINY)
    return DenseArray._result(np.log(x), (a,), lambda g: (g / x,), "log")


def softmax_rows(a) -> DenseArray:
    a = _as_array(a)
    if a.data.ndim != 2:
        raise ContractViolation(f"softmax_rows: expected a matrix, got shape {a.shape}")
    if a.shape[1] == 0:
        raise ContractViolation("softmax_rows: empty row axis")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return DenseArray._result(s, (a,), back, "softmax_rows")


# -- reductions -------------------------------------------------------------


def sum(a, axis: int | None = None) -> DenseArray:  # noqa: A001 - mirrors numpy naming
    a = _as_array(a)
    src = a.shape
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.full(src, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return DenseArray._result(np.asarray(out, dtype=np.float64), (a,), back, "sum")


def mean(a, axis: int | None = None) -> DenseArray:
    a = _as_array(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ContractViolation("mean: empty operand")
    return scale(sum(a, axis=axis), 1.0 / n)


# -- losses -----------------------------------------------------------------


def cross_entropy(logits, target) -> DenseArray:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    ``logits`` is ``(C,)`` with a scalar target, or ``(B, C)`` with ``B`` targets.
    """
    logits = _as_array(logits)
    x = logits.data
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] == 0:
        raise ContractViolation(f"cross_entropy: bad logits shape {logits.shape}")
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape != (x.shape[0],) or np.any(t < 0) or np.any(t >= x.shape[1]):
        raise ContractViolation(f"cross_entropy: targets {t.tolist()} do not fit logits {logits.shape}")
    z = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(x.shape[0])
    loss = -logp[rows, t].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= float(g) / x.shape[0]
        return (d[0] if single else d,)

    return DenseArray._result(np.asarray(loss), (logits,), back, "cross_entropy")


def mse(pred, target) -> DenseArray:
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape:
        raise ContractViolation(f"mse: shapes {pred.shape} and {target.shape} do not match")
    diff = pred.data - target.data
    n = diff.size

    def back(g):
        d = diff * (2.0 * float(g) / n)
        return (d if pred.requires_grad else None, -d if target.requires_grad else None)

    return DenseArray._result(np.asarray((diff * diff).mean()), (pred, target), back, "mse")


# -- image ops --------------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1) -> DenseArray:
    """3x3 cross-correlation with one pixel of zero padding.

    Arrays are channel-major: ``x`` is ``(C, N, H, W)``, ``weight`` is
    ``(O, C, 3, 3)``, ``bias`` is ``(O,)`` and the output is
    ``(O, N, ceil(H/stride), ceil(W/stride))``.  With a single input channel
    this is the same memory as the usual ``(N, 1, H, W)``.
    """
    x, weight = _as_array(x), _as_array(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.shape[2:] != (3, 3) or x.shape[0] != weight.shape[1]:
        raise ContractViolation(f"conv2d: incompatible input {x.shape} and kernel {weight.shape}")
    if stride < 1:
        raise ContractViolation(f"conv2d: stride must be >= 1, got {stride}")
    c, n, h, w = x.shape
    o = weight.shape[0]
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.zeros((c, n, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x.data
    # patches laid out (ky, kx, C) x (N, Ho, Wo) so one GEMM does the whole batch
    patches = np.empty((3, 3, c, n, ho, wo))
    for i in range(3):
        for j in range(3):
            patches[i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    patches = patches.reshape(9 * c, n * ho * wo)
    kernel = weight.data.transpose(0, 2, 3, 1).reshape(o, 9 * c)
    out = kernel @ patches
    parents: tuple[DenseArray, ...] = (x, weight)
    if bias is not None:
        bias = _as_array(bias)
        if bias.shape != (o,):
            raise ContractViolation(f"conv2d: bias shape {bias.shape} does not match kernel {weight.shape}")
        out += bias.data[:, None]
        parents = parents + (bias,)

    def back(g):
        gm = g.reshape(o, n * ho * wo)
        gw = None
        if weight.requires_grad:
            gw = (gm @ patches.T).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gp = (kernel.T @ gm).reshape(3, 3, c, n, ho, wo)
            gxp = np.zeros((c, n, h + 2, w + 2))
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gp[i, j]
            gx = gxp[:, :, 1:-1, 1:-1]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=1) if bias.requires_grad else None)
        return grads

    return DenseArray._result(out.reshape(o, n, ho, wo), parents, back, "conv2d")


def upsample2x_nearest(x) -> DenseArray:
    """Repeat every pixel 2x2 along the last two axes of a 4-D array."""
    x = _as_array(x)
    if x.data.ndim != 4:
        raise ContractViolation(f"upsample2x_nearest: expected a 4-D array, got shape {x.shape}")
    a, b, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (a, b, h, 2, w, 2)).reshape(a, b, 2 * h, 2 * w)

    def back(g):
        return (g.reshape(a, b, h, 2, w, 2).sum(axis=(3, 5)),)

    return DenseArray._result(out, (x,), back, "upsample2x_nearest")


def global_avg_pool(x) -> DenseArray:
    """Spatial mean of a channel-major ``(C, N, H, W)`` array, returned as ``(N, C)``."""
    x = _as_array(x)
    if x.data.ndim != 4:
        raise ContractViolation(f"global_avg_pool: expected (C, N, H, W), got shape {x.shape}")
    c, n, h, w = x.shape

    def back(g):
        return (np.broadcast_to((g.T / (h * w))[:, :, None, None], (c, n, h, w)).copy(),)

    return DenseArray._result(x.data.mean(axis=(2, 3)).T.copy(), (x,), back, "global_avg_pool")


# -- optimisation -----------------------------------------------------------


class SGD:
    """Stochastic gradient descent with heavy-ball momentum.

    ``v <- momentum * v + grad`` then ``p <- p - lr * v``; grads are zeroed after the update.
    """

    def __init__(self, params: Iterable[DenseArray], lr: float, momentum: float = 0.0):
        self.params = list(params)
        if lr <= 0:
            raise ContractViolation(f"SGD: learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ContractViolation(f"SGD: momentum must lie in [0, 1), got {momentum}")
        for p in self.params:
            if not p.requires_grad:
                raise ContractViolation(f"SGD: parameter of shape {p.shape} has no gradient")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                raise ContractViolation(f"SGD: parameter of shape {p.shape} has no gradient")
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Adam(SGD):
    """Adam with bias-corrected first and second moment estimates.

    ``momentum`` plays the role of beta1; ``beta2`` and ``eps`` as usual.
    """

    def __init__(self, params: Iterable[DenseArray], lr: float, momentum: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr, momentum)
        if not 0.0 <= beta2 < 1.0:
            raise ContractViolation(f"Adam: beta2 must lie in [0, 1), got {beta2}")
        if eps <= 0:
            raise ContractViolation(f"Adam: eps must be positive, got {eps}")
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._second = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.momentum, self.beta2
        c1, c2 = 1.0 - b1 ** self._t, 1.0 - b2 ** self._t
        for p, m, s in zip(self.params, self._velocity, self._second):
            if p.grad is None:
                raise ContractViolation(f"Adam: parameter of shape {p.shape} has no gradient")
            m *= b1
            m += (1.0 - b1) * p.grad
            s *= b2
            s += (1.0 - b2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(s / c2) + self.eps)
            p.grad = np.zeros_like(p.data)
