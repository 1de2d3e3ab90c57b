"""Dense 2-D tensors with a reverse-mode gradient tape.

A :class:`Tensor` is an immutable float64 matrix.  Tensors produced from
inputs that live on a :class:`GradientTape` are recorded on that tape; all
other tensors are constants and cost no more than the underlying numpy call.
The tape is carried by the tensors themselves, so there is no global
"active tape" and several tapes can be used from different threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Parameter",
    "GradientTape",
    "as_tensor",
    "record",
    "record_binary",
    "record_unary",
    "add",
    "sub",
    "matmul",
    "hadamard",
    "neg",
    "apply_mask",
    "reciprocal",
    "transpose",
    "scale",
    "scalar_mul",
    "sigmoid",
    "absolute",
    "mean",
    "total",
    "hstack",
    "backward",
]


class Tensor:
    """A ``rows x cols`` float64 matrix, optionally a node of a gradient tape."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 1000  # make ``ndarray @ Tensor`` dispatch to Tensor

    def __init__(self, value, tape: "GradientTape | None" = None, node: int | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(-1, 1)
        elif value.ndim > 2:
            raise DimensionError(f"tensors are at most 2-D, got shape {value.shape}")
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def data(self) -> np.ndarray:
        """Row-major flat copy of the entries."""
        return self.value.ravel().copy()

    @property
    def is_constant(self) -> bool:
        return self.node is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return np.array(self.value)

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor({self.value.tolist()}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return NotImplemented

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return _slice(self, key)


class Parameter:
    """A trainable matrix: value, gradient accumulator and a ``trainable`` flag.

    The value is a plain writable numpy array owned by the parameter; the
    optimizer updates it in place.  Non-trainable parameters are watched as
    constants, so no gradient ever flows into them.
    """

    def __init__(self, value, trainable: bool = True, name: str | None = None):
        value = np.array(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(-1, 1)
        self.value = value
        self.grad = np.zeros_like(value)
        self.trainable = bool(trainable)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def constant(self) -> Tensor:
        """Snapshot of the current value as a constant tensor."""
        return Tensor(self.value.copy())

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class _Node:
    kind: str
    inputs: tuple
    vjp: Callable | None
    shape: tuple


@dataclass
class GradientTape:
    """Ordered record of operations, replayed in reverse by :meth:`backward`."""

    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)  # node id -> Parameter
    flags: set = field(default_factory=set)

    def __post_init__(self):
        self._watched = {}

    def watch(self, param: Parameter) -> Tensor:
        """Enter ``param`` as a leaf of the tape (a constant if not trainable)."""
        if not param.trainable:
            return Tensor(param.value.copy())
        node = self._watched.get(id(param))
        if node is None:
            node = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None, param.value.shape))
            self.params[node] = param
            self._watched[id(param)] = node
        return Tensor(param.value.copy(), self, node)

    def record(self, kind: str, value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        node = len(self.nodes)
        out = Tensor(value, self, node)
        self.nodes.append(_Node(kind, ids, vjp, out.shape))
        return out

    def backward(self, root: Tensor) -> dict:
        """Reverse sweep from a scalar ``root``; returns ``{Parameter: grad}``.

        Gradients are also added to each parameter's ``grad`` accumulator.
        """
        if root.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) root, got {root.shape}")
        if root.tape is None:
            return {}
        if root.tape is not self:
            raise ContractError("root tensor belongs to another tape")
        grads: list = [None] * (root.node + 1)
        grads[root.node] = np.ones((1, 1))
        for i in range(root.node, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for j, contrib in zip(node.inputs, node.vjp(g)):
                if j is None or contrib is None:
                    continue
                grads[j] = contrib if grads[j] is None else grads[j] + contrib
        out = {}
        for j, param in self.params.items():
            g = grads[j] if j < len(grads) and grads[j] is not None else np.zeros(param.value.shape)
            param.grad = param.grad + g
            out[param] = g
        return out


def backward(root: Tensor) -> dict:
    """Backpropagate from ``root`` through the tape it was recorded on."""
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) root, got {root.shape}")
    if root.tape is None:
        return {}
    return root.tape.backward(root)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        raise ContractError("parameters must be entered through GradientTape.watch")
    return Tensor(x)


def record(kind: str, value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Create the output of an operation, recording it when an input is on a tape.

    ``vjp(g)`` must return one gradient (or ``None``) per input.
    """
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands belong to different gradient tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    return tape.record(kind, value, inputs, vjp)


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return record("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return record("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    av, bv = a.value, b.value
    return record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("hadamard", a, b)
    av, bv = a.value, b.value
    return record("hadamard", av * bv, (a, b), lambda g: (g * bv, g * av))


def apply_mask(mask, a) -> Tensor:
    """Zero the entries of ``a`` where the binary ``mask`` is 0.

    Same gradient as ``hadamard(mask, a)``, but masked entries are written as
    +0.0 so structural zeros are bit-exact whatever the sign of ``a``.
    """
    a = as_tensor(a)
    keep = np.asarray(mask) != 0
    if keep.shape != a.shape:
        raise DimensionError(f"apply_mask: mask shape {keep.shape} and tensor shape {a.shape} differ")
    return record("mask", np.where(keep, a.value, 0.0), (a,), lambda g: (np.where(keep, g, 0.0),))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.value, (a,), lambda g: (-g,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return record("transpose", a.value.T, (a,), lambda g: (g.T,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record("scale", c * a.value, (a,), lambda g: (c * g,))


def scalar_mul(s, a) -> Tensor:
    """``s * a`` for a 1x1 tensor ``s``."""
    s, a = as_tensor(s), as_tensor(a)
    if s.shape != (1, 1):
        raise DimensionError(f"scalar_mul: scalar operand has shape {s.shape}")
    sv, av = s.value[0, 0], a.value
    return record("scalar_mul", sv * av, (s, a), lambda g: (np.sum(g * av).reshape(1, 1), sv * g))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    r = 1.0 / a.value
    return record("reciprocal", r, (a,), lambda g: (-g * r * r,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.value)
    return record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.value)
    return record("abs", np.abs(a.value), (a,), lambda g: (g * sign,))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.value.size
    shape = a.shape
    return record("mean", a.value.mean().reshape(1, 1), (a,), lambda g: (np.full(shape, g[0, 0] / n),))


def total(a) -> Tensor:
    """Sum of all entries, as a 1x1 tensor."""
    a = as_tensor(a)
    shape = a.shape
    return record("sum", a.value.sum().reshape(1, 1), (a,), lambda g: (np.full(shape, g[0, 0]),))


def _slice(a: Tensor, key) -> Tensor:
    if not (isinstance(key, tuple) and len(key) == 2 and all(isinstance(k, slice) for k in key)):
        raise ContractError("tensors only support 2-D slice indexing, e.g. t[0:2, 1:3]")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return record("slice", a.value[key], (a,), vjp)


def hstack(tensors: Sequence) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    rows = {t.rows for t in tensors}
    if len(rows) != 1:
        raise DimensionError(f"hstack: row counts differ: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.cols for t in tensors])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return record("hstack", np.hstack([t.value for t in tensors]), tensors, vjp)


_BINARY = {"add": add, "sub": sub, "matmul": matmul, "hadamard": hadamard}
_UNARY = {
    "transpose": transpose,
    "sigmoid": sigmoid,
    "neg": neg,
    "mean_over_all": mean,
    "abs": absolute,
    "sum": total,
}


def record_binary(kind: str, a, b) -> Tensor:
    """Dispatch one of ``add``, ``sub``, ``matmul``, ``hadamard`` by name."""
    try:
        return _BINARY[kind](a, b)
    except KeyError:
        raise ContractError(f"unknown binary op {kind!r}") from None


def record_unary(kind: str, a, c: float | None = None) -> Tensor:
    """Dispatch a unary op by name; ``scale`` takes the constant ``c``."""
    if kind == "scale":
        if c is None:
            raise ContractError("scale needs a constant")
        return scale(a, c)
    try:
        return _UNARY[kind](a)
    except KeyError:
        raise ContractError(f"unknown unary op {kind!r}") from None
