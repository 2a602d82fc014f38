"""Small dense-array engine with reverse-mode automatic differentiation.

Values live in float64 numpy arrays.  Every operation that touches a tensor
requiring gradients appends a node to an implicit tape: the node remembers its
parents and a closure that maps the output gradient to parent gradients.
Nodes carry a monotonically increasing creation index, so sorting ancestors by
that index gives a valid topological order without a separate graph object.

Only rank-0 broadcasting is supported.  Two operands must either have equal
shapes or one of them must be a scalar.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "ShapeError",
    "Tensor",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sigmoid",
    "square",
    "relu",
    "clip",
    "sum",
    "mean",
    "max_reduce",
    "take",
    "reshape",
    "conv2d",
    "backward",
]

_creation = itertools.count()

# sigmoid output is kept strictly inside (0, 1)
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class Tensor:
    """Dense float64 array that can participate in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._order = next(_creation)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return _getitem(self, key)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo rank-0 broadcasting
    if shape == grad.shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def _back(g):
        return (
            _reduce_to(g / b.data, a.shape),
            _reduce_to(-g * out / b.data, b.shape),
        )

    return _node(out, (a, b), _back)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    a = _as_tensor(a)
    p = float(exponent)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError("power: negative base with non-integer exponent")
    if p == 0.0:
        return _node(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(g),))

    def _back(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(a.data**p, (a,), _back)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: argument must be strictly positive")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(0.5 * (1.0 + np.tanh(0.5 * a.data)), _SIG_LO, _SIG_HI)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input was inside."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ----------------------------------------------------------------- reductions


def _check_axis(a: Tensor, axis, name: str) -> None:
    if axis is None:
        if a.size == 0:
            raise ShapeError(f"{name}: empty reduction")
        return
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{name}: axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeError(f"{name}: empty reduction along axis {axis}")


def _expand(g: np.ndarray, a: Tensor, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, a.shape)
    return np.broadcast_to(np.expand_dims(g, axis), a.shape)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    _check_axis(a, axis, "sum")
    return _node(np.sum(a.data, axis=axis), (a,), lambda g: (_expand(g, a, axis).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    _check_axis(a, axis, "mean")
    n = a.size if axis is None else a.shape[axis]
    return _node(np.mean(a.data, axis=axis), (a,), lambda g: (_expand(g, a, axis) / n,))


def max_reduce(a, axis: int | None = None) -> Tensor:
    """Maximum; the gradient goes to the first maximal element only."""
    a = _as_tensor(a)
    _check_axis(a, axis, "max_reduce")
    if axis is None:
        flat = a.data.reshape(-1)
        k = int(np.argmax(flat))

        def _back_all(g):
            out = np.zeros(a.size)
            out[k] = g
            return (out.reshape(a.shape),)

        return _node(flat[k], (a,), _back_all)

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def _back(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out, (a,), _back)


# -------------------------------------------------------------- restructuring


def take(a, indices) -> Tensor:
    """Gather from the flattened tensor; the result has the shape of ``indices``."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise ShapeError(f"take: index out of range for {a.size} elements")
    flat_idx = idx.reshape(-1)

    def _back(g):
        acc = np.bincount(flat_idx, weights=g.reshape(-1), minlength=a.size)
        return (acc.reshape(a.shape),)

    return _node(a.data.reshape(-1)[idx], (a,), _back)


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is Ellipsis for k in keys)


def _getitem(a: Tensor, key) -> Tensor:
    basic = _is_basic(key)

    def _back(g):
        full = np.zeros(a.shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _node(a.data[key], (a,), _back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # x: [C, H, W] -> [C*k*k, H*W], zero padding k//2
    c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + h, j : j + w]
    return cols.reshape(c * k * k, h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], k: int) -> np.ndarray:
    c, h, w = shape
    p = k // 2
    cols = cols.reshape(c, k, k, h, w)
    xp = np.zeros((c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            xp[:, i : i + h, j : j + w] += cols[:, i, j]
    return xp[:, p : p + h, p : p + w]


def conv2d(x, weight, bias) -> Tensor:
    """Shape-preserving 2-D cross-correlation.

    ``x`` is ``[C_in, H, W]``, ``weight`` is ``[C_out, C_in, k, k]`` with odd
    ``k``, ``bias`` is ``[C_out]``.  Stride 1, zero padding ``k // 2``.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 3 or weight.ndim != 4 or bias.ndim != 1:
        raise ShapeError("conv2d: expected x [C,H,W], weight [O,C,k,k], bias [O]")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if c_in != x.shape[0] or bias.shape[0] != c_out:
        raise ShapeError(
            f"conv2d: channel mismatch x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    _, h, w = x.shape
    cols = _im2col(x.data, k)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols + bias.data[:, None]).reshape(c_out, h, w)

    def _back(g):
        gm = g.reshape(c_out, h * w)
        gw = (gm @ cols.T).reshape(weight.shape)
        gx = _col2im(wmat.T @ gm, x.shape, k) if x.requires_grad else None
        return (gx, gw, gm.sum(axis=1))

    return _node(out, (x, weight, bias), _back)


# ------------------------------------------------------------------- backward


def _ancestors(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    # creation order is a topological order
    return sorted(seen.values(), key=lambda t: t._order, reverse=True)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring gradients.

    ``root`` must be a scalar.  Calling twice without zeroing accumulates.
    """
    if root.shape != ():
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in _ancestors(root):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else np.array(pg, dtype=np.float64)
