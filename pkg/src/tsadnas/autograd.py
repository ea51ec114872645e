"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records a node carrying a global sequence number.
Sequence numbers are handed out in forward order, so sorting the nodes that
are reachable from a loss by descending sequence number replays the tape in
reverse. Nothing here is shared between threads except the sequence counter,
so independent graphs can be built and differentiated concurrently.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes or a 0-d scalar operand. Bias and per-feature scaling go through the
dedicated ``linear`` and ``affine`` ops instead.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, StateError

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-8

_seq = itertools.count()
_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Node:
    __slots__ = ("seq", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, op: str, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward)
    return out


class ComputationGraph:
    """Recorded ops reachable from an output, in forward (tape) order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationGraph":
        seen = set()
        found = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        return cls(found)

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [t.node.op for t in self.nodes]

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for t in self.nodes:
            for x in t.node.inputs:
                if x.node is None and x.requires_grad and id(x) not in seen:
                    seen.add(id(x))
                    out.append(x)
        return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf that ``loss`` depends on."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss was not produced by recorded ops")
    graph = ComputationGraph.from_output(loss)
    leaves = graph.leaves()
    for leaf in leaves:
        if leaf.grad is not None:
            raise StateError(
                f"gradient already populated on {leaf.name or 'a leaf'}; call zero_grad first"
            )
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        for x, gx in zip(node.inputs, node.backward(g)):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
    for leaf in leaves:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` is either a plain matrix shared
    across the batch or has the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    shared = B.ndim == 2 and A.ndim > 2

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g.reshape(-1, g.shape[-1]) @ B.T if shared else g @ np.swapaxes(B, -1, -2)
            ga = ga.reshape(A.shape)
        if b.requires_grad:
            if shared:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    if shared:
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(A.shape[:-1] + (B.shape[1],))
    else:
        out = A @ B
    return _record(out, "matmul", (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``bias`` broadcast over every leading axis."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape}")
    X, Wt = x.data, weight.data
    # one flat GEMM is far faster than numpy's stacked small products
    X2 = X.reshape(-1, X.shape[-1])
    out = X2 @ Wt
    if bias is not None:
        out += bias.data
    out = out.reshape(X.shape[:-1] + (Wt.shape[1],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ Wt.T).reshape(X.shape) if x.requires_grad else None
        gw = X2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, "linear", inputs, bw)


def affine(x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """Per-feature ``x * gain + shift`` over the last axis."""
    n = x.shape[-1]
    if gain.shape != (n,) or shift.shape != (n,):
        raise DimensionError(f"affine parameters {gain.shape}/{shift.shape} vs input {x.shape}")
    X = x.data

    def bw(g):
        g2 = g.reshape(-1, n)
        return g * gain.data, (g2 * X.reshape(-1, n)).sum(axis=0), g2.sum(axis=0)

    return _record(X * gain.data + shift.data, "affine", (x, gain, shift), bw)


# ------------------------------------------------------------------ elementwise


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if like.ndim == 0 and g.ndim != 0 else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _record(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _record(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    A, B = a.data, b.data

    def bw(g):
        return _reduce_to(g * B, a), _reduce_to(g * A, b)

    return _record(A * B, "mul", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, "scale", (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    X = x.data
    return _record(X * X, "square", (x,), lambda g: (2.0 * X * g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _record(x.data * factor, "leaky_relu", (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument only, so no overflow either side
    X = x.data
    e = np.exp(-np.abs(X))
    y = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name; ``scale`` takes ``(x, c)``."""
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale, **ACTIVATIONS}
    try:
        fn = table[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ------------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _record(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _record(
        np.asarray(x.data.mean()), "mean", (x,), lambda g: (np.full(shape, float(g) / n),)
    )


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, "softmax", (x,), bw)


softmax_rows = softmax


def standardize(x: Tensor, axes: Sequence[int], eps: float = NORM_EPS) -> Tensor:
    """Zero mean, unit (population) variance over ``axes``."""
    axes = tuple(a % x.ndim for a in axes)
    X = x.data
    mu = X.mean(axis=axes, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record(xhat, "standardize", (x,), bw)


# ---------------------------------------------------------------- shape changes


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat shapes disagree off axis {axis}: {ref} vs {x.shape}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(np.concatenate([x.data for x in xs], axis=ax), "concat", xs, bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout. Identity outside training or when ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * mask, "dropout", (x,), lambda g: (g * mask,))
