"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs are already on the tape
or are :class:`Parameter` objects used while the tape is active::

    w = Parameter(np.ones(3), name="w")
    with Tape() as tape:
        loss = (w * w).sum()
    grads = backward(loss)          # {w: Tensor([2., 2., 2.])}

Tapes are define-by-run and meant to be rebuilt every training step.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DetachedError, NumericFault, ShapeError

_ACTIVE: list["Tape"] = []


class _Node(NamedTuple):
    kind: str
    inputs: tuple  # node indices (or None for constants)
    vjp: Optional[Callable]  # grad_out -> tuple of grads, one per input


class Tape:
    """Append-only record of operations, consumed by :func:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict = {}
        self._leaves: list[tuple["Tensor", int]] = []
        self._leaf_index: dict[int, int] = {}

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _append(self, kind, inputs, vjp) -> int:
        self.nodes.append(_Node(kind, tuple(inputs), vjp))
        return len(self.nodes) - 1

    def _leaf(self, t: "Tensor") -> int:
        idx = self._leaf_index.get(id(t))
        if idx is None:
            idx = self._append("leaf", (), None)
            self._leaf_index[id(t)] = idx
            self._leaves.append((t, idx))
        return idx

    def watch(self, t) -> "Tensor":
        """Register ``t`` as a leaf and return the handle gradients are keyed by.

        Parameters are their own handle; any other tensor is copied into a
        fresh tape-bound leaf.
        """
        if isinstance(t, Parameter):
            self._leaf(t)
            return t
        t = as_tensor(t)
        if t.tape is not None:
            raise ValueError("tensor is already recorded on a tape")
        out = Tensor(t.data, plated=t.plated)
        out.tape = self
        out.node = self._leaf(out)
        return out

    @property
    def leaves(self) -> list["Tensor"]:
        return [t for t, _ in self._leaves]


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


@contextmanager
def no_grad():
    """Suspend all active tapes; parameters used inside are not recorded."""
    saved = _ACTIVE[:]
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE[:] = saved


class Tensor:
    """An n-dimensional float64 array, optionally bound to a tape node.

    ``plated`` marks tensors whose leading axis is the plate (data) axis; it
    is propagated through operations and used by model tracing to decide
    whether a distribution already carries the replication axis.
    """

    __array_priority__ = 100.0

    def __init__(self, data, plated: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.tape: Optional[Tape] = None
        self.node: Optional[int] = None
        self.plated = bool(plated)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, plated=self.plated)

    def __repr__(self):
        body = np.array2string(self.data, precision=6)
        tag = ", tape" if self.tape is not None else ""
        return f"Tensor({body}{tag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    # elementwise methods, for fluency in model code
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


class Parameter(Tensor):
    """A trainable leaf whose ``data`` is updated in place by optimizers.

    Parameters are never bound to a tape themselves; each tape registers them
    as a leaf on first use.
    """

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple:
    """Trailing-axis broadcast of two shapes."""
    try:
        return np.broadcast_shapes(tuple(a), tuple(b))
    except ValueError:
        raise ShapeError(f"shapes {list(a)} and {list(b)} are not broadcastable") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(kind: str, data: np.ndarray, inputs: Sequence[Tensor], vjp, plated: bool) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.plated = plated
    out.tape = None
    out.node = None

    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands are recorded on different tapes")
            tape = t.tape
    if tape is None:
        if not _ACTIVE or not any(isinstance(t, Parameter) for t in inputs):
            return out
        tape = _ACTIVE[-1]

    idx = []
    for t in inputs:
        if t.tape is tape:
            idx.append(t.node)
        elif isinstance(t, Parameter):
            idx.append(tape._leaf(t))
        else:
            idx.append(None)
    out.tape = tape
    out.node = tape._append(kind, idx, vjp)
    return out


# elementwise ------------------------------------------------------------


def _binary(kind, a, b, fwd, grads, guard=False):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb:
        broadcast_shape(sa, sb)
    if guard:
        with np.errstate(all="ignore"):
            data = fwd(a.data, b.data)
    else:
        data = fwd(a.data, b.data)

    def vjp(g):
        with np.errstate(all="ignore"):
            ga, gb = grads(g, a.data, b.data, data)
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _record(kind, data, (a, b), vjp, a.plated or b.plated)


def fused(kind: str, inputs: Sequence, fwd, grads) -> Tensor:
    """A broadcasting n-ary op with a hand-written vector-Jacobian product.

    ``fwd(*arrays)`` computes the output; ``grads(g, *arrays, out)`` returns
    one gradient per input at the broadcast shape.
    """
    inputs = [as_tensor(t) for t in inputs]
    shapes = [t.data.shape for t in inputs]
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"shapes {[list(s) for s in shapes]} are not broadcastable") from None
    arrays = [t.data for t in inputs]
    with np.errstate(all="ignore"):
        data = np.asarray(fwd(*arrays), dtype=np.float64)

    def vjp(g):
        with np.errstate(all="ignore"):
            gs = grads(g, *arrays, data)
        return tuple(_unbroadcast(np.broadcast_to(gi, data.shape), s) for gi, s in zip(gs, shapes))

    return _record(kind, data, inputs, vjp, any(t.plated for t in inputs))


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y, z: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, z: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y, z: (g * y, g * x), guard=True)


def div(a, b) -> Tensor:
    return _binary("div", a, b, np.divide, lambda g, x, y, z: (g / y, -g * x / (y * y)), guard=True)


def _unary(kind, a, fwd, deriv, guard=False):
    a = a if isinstance(a, Tensor) else Tensor(a)
    if guard:
        with np.errstate(all="ignore"):
            data = fwd(a.data)
    else:
        data = fwd(a.data)

    def vjp(g):
        with np.errstate(all="ignore"):
            return (g * deriv(a.data, data),)

    return _record(kind, data, (a,), vjp, a.plated)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda x, y: y, guard=True)


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda x, y: 1.0 / x, guard=True)


def neg(a) -> Tensor:
    return _unary("neg", a, np.negative, lambda x, y: -np.ones_like(x))


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", a, _sigmoid, lambda x, y: y * (1.0 - y))


def relu(a) -> Tensor:
    # subgradient at 0 is 0
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def softplus(a) -> Tensor:
    return _unary("softplus", a, _softplus, lambda x, y: _sigmoid(x))


def square(a) -> Tensor:
    return _unary("square", a, np.square, lambda x, y: 2.0 * x, guard=True)


UNARY = {
    "exp": exp,
    "log": log,
    "neg": neg,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softplus": softplus,
    "square": square,
}
BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply a named elementwise operation (unary when ``b`` is None)."""
    if op in BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return BINARY[op](a, b)
    if op in UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# linear algebra and reductions -----------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {list(a.shape)} and {list(b.shape)}")
    x, y = a.data, b.data
    data = x @ y

    def vjp(g):
        return g @ y.T, x.T @ g

    return _record("matmul", data, (a, b), vjp, a.plated)


def reduce(op: str, a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    shape = a.shape
    if axis is not None:
        if not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"axis {axis} out of range for shape {list(shape)}")
        axis = axis % a.ndim
        count = shape[axis]
    else:
        count = a.data.size
    data = a.data.sum(axis=axis)
    if op == "mean":
        data = data / count

    def vjp(g):
        if op == "mean":
            g = g / count
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    plated = a.plated and axis is not None and axis != 0
    return _record(op, np.asarray(data, dtype=np.float64), (a,), vjp, plated)


def sum(a, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return reduce("sum", a, axis)


def mean(a, axis: Optional[int] = None) -> Tensor:
    return reduce("mean", a, axis)


# reverse pass -----------------------------------------------------------


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict:
    """Gradients of a scalar ``loss`` for every leaf on its tape.

    Returns a mapping from leaf handle to a :class:`Tensor` of the leaf's
    shape; leaves the loss does not depend on get zeros. The map is also
    stored on ``tape.gradients`` and is recomputed from scratch on each call.
    """
    if loss.tape is None:
        raise DetachedError("loss is not recorded on any tape")
    if tape is None:
        tape = loss.tape
    elif loss.tape is not tape:
        raise DetachedError("loss belongs to a different tape")
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")

    nodes = tape.nodes
    grads: list = [None] * len(nodes)
    grads[loss.node] = np.ones(())
    for i in range(loss.node, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for j, gj in zip(node.inputs, node.vjp(g)):
            if j is None:
                continue
            if np.isnan(gj).any():
                raise NumericFault(f"nan gradient flowing from {node.kind} (node {i}) into node {j}")
            grads[j] = gj if grads[j] is None else grads[j] + gj

    result = {}
    for handle, idx in tape._leaves:
        g = grads[idx]
        result[handle] = Tensor(np.zeros(handle.shape) if g is None else np.reshape(g, handle.shape))
    tape.gradients = result
    return result
