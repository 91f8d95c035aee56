"""Dense-tensor reverse-mode automatic differentiation.

Values are float64 numpy arrays. Every differentiable op appends a `Node` to
the active `Tape`; `backward` walks the tape in reverse and pushes gradients
to the leaf tensors that have ``requires_grad`` set. Only scalar-vs-tensor
broadcasting is supported.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "Node",
    "ShapeError",
    "Tape",
    "Tensor",
    "abs_",
    "activation",
    "add",
    "backward",
    "current_tape",
    "ew_binary",
    "linear",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "pick",
    "reduce",
    "softmax",
    "sub",
    "sum_",
    "zero_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


@dataclass(eq=False)
class Node:
    """One recorded operation: its operands and how to push a gradient back."""

    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    """Append-only record of the ops of one forward pass.

    Nodes are appended when ops execute, so operands always precede the nodes
    that consume them. Use as a context manager to make it the active tape::

        with Tape() as tape:
            loss = mean(mul(w, w))
        backward(loss, tape)
    """

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list[Tape | None]:
    # one stack per thread; the bottom entry is that thread's default tape
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def current_tape() -> Tape | None:
    """The tape new ops record into, or None inside `no_grad`."""
    return _stack()[-1]


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording anything."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """A float64 array with an optional gradient and a link into the tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(arr, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out.node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return reduce("sum", self)

    def mean(self) -> "Tensor":
        return reduce("mean", self)

    def relu(self) -> "Tensor":
        return activation("relu", self)

    def tanh(self) -> "Tensor":
        return activation("tanh", self)

    def sigmoid(self) -> "Tensor":
        return activation("sigmoid", self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value: np.ndarray, op: str, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor._wrap(value)
    tape = current_tape()
    if tape is not None and any(t.tracked for t in inputs):
        node = Node(op, inputs, out, grad_fn, tape)
        out.node = node
        tape.record(node)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 matrix product ``[m, k] @ [k, n] -> [m, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, "matmul", (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with the bias added to every row."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xv, wv = x.data, weight.data

    def grad_fn(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _emit(xv @ wv + bias.data, "linear", (x, weight, bias), grad_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return g.sum().reshape(shape) if shape == () and g.shape != () else g


_BINARY = {
    "add": (np.add, lambda g, a, b: (g, g)),
    "sub": (np.subtract, lambda g, a, b: (g, -g)),
    "mul": (np.multiply, lambda g, a, b: (g * b, g * a)),
}


def ew_binary(op: str, a, b) -> Tensor:
    """Elementwise ``add``/``sub``/``mul``. A 0-d operand broadcasts over the other."""
    if op not in _BINARY:
        raise ValueError(f"unknown binary op {op!r}; expected one of {sorted(_BINARY)}")
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")
    fwd, bwd = _BINARY[op]
    av, bv = a.data, b.data

    def grad_fn(g):
        ga, gb = bwd(g, av, bv)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(fwd(av, bv), op, (a, b), grad_fn)


def add(a, b) -> Tensor:
    return ew_binary("add", a, b)


def sub(a, b) -> Tensor:
    return ew_binary("sub", a, b)


def mul(a, b) -> Tensor:
    return ew_binary("mul", a, b)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# name -> (forward, derivative expressed through input x and output y)
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "identity": (lambda x: x.copy(), lambda x, y: np.ones_like(x)),
}


def activation(kind: str, x: Tensor) -> Tensor:
    """Elementwise nonlinearity; relu has derivative 0 at exactly 0."""
    try:
        fwd, deriv = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(
            f"unknown activation {kind!r}; valid names: {', '.join(sorted(ACTIVATIONS))}"
        ) from None
    xv = x.data
    yv = fwd(xv)

    def grad_fn(g):
        return (g * deriv(xv, yv),)

    return _emit(yv, kind, (x,), grad_fn)


def _require_rank2(name: str, x: Tensor) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{name}: expected a rank-2 [batch, classes] tensor, got {x.shape}")


def _softmax_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of a ``[B, K]`` tensor."""
    _require_rank2("softmax", logits)
    y = _softmax_np(logits.data)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit(y, "softmax", (logits,), grad_fn)


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise ``x - logsumexp(x)``."""
    _require_rank2("log_softmax", logits)
    v = logits.data
    shifted = v - v.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _emit(out, "log_softmax", (logits,), grad_fn)


def pick(x: Tensor, index) -> Tensor:
    """Select ``x[i, index[i]]`` for every row, giving a ``[B]`` tensor."""
    _require_rank2("pick", x)
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"pick: {idx.shape[0]} indices for {x.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"pick: index out of range [0, {x.shape[1]})")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _emit(x.data[rows, idx], "pick", (x,), grad_fn)


def abs_(x: Tensor) -> Tensor:
    """Elementwise absolute value; derivative 0 at 0."""
    xv = x.data

    def grad_fn(g):
        return (g * np.sign(xv),)

    return _emit(np.abs(xv), "abs", (x,), grad_fn)


def reduce(kind: str, x: Tensor) -> Tensor:
    """Reduce every element to a 0-d tensor with ``sum`` or ``mean``."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}; expected 'sum' or 'mean'")
    shape = x.shape
    n = x.size
    scale = 1.0 if kind == "sum" else 1.0 / n

    def grad_fn(g):
        return (np.full(shape, float(g) * scale),)

    value = x.data.sum() if kind == "sum" else x.data.mean()
    return _emit(np.asarray(value), kind, (x,), grad_fn)


def sum_(x: Tensor) -> Tensor:
    return reduce("sum", x)


def mean(x: Tensor) -> Tensor:
    return reduce("mean", x)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf that ``loss`` depends on.

    Gradients add onto any existing ``.grad``. The tape is cleared afterwards.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError("backward: loss is not tape-tracked (no recorded op produced it)")
    tape = tape if tape is not None else loss.node.tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.tracked:
                continue
            if inp.node is not None:
                prev = pending.get(id(inp))
                pending[id(inp)] = gi if prev is None else prev + gi
            else:
                inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi
    tape.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
