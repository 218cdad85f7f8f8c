"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive application made while it is active.
:func:`backward` walks the record in reverse and fills ``.grad`` on every
tensor that took part. The primitive set is closed (see ``PRIMITIVES``);
composite expressions (GRU cells, attention, losses) are built from it.

Primitives broadcast the numpy way and matrix-multiply batches over leading
axes, so one record can hold a whole padded minibatch.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "no_grad",
    "apply_primitive", "backward", "grad_check", "optimizer_step", "SGD",
    "matmul", "add", "mul", "sigmoid", "tanh", "softmax", "log_softmax",
    "concat", "embedding", "sum", "scale", "sub", "constant", "parameter",
]

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Dense array node. ``data`` holds the values; ``grad`` mirrors its shape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("tag", "inputs", "output", "saved", "attrs")

    def __init__(self, tag, inputs, output, saved, attrs):
        self.tag = tag
        self.inputs = inputs
        self.output = output
        self.saved = saved
        self.attrs = attrs


class Tape:
    """Ordered record of primitive applications (the computation record).

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    _stack: list["Tape | None"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @staticmethod
    def current() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None


class no_grad:
    """Suspend recording (forward-only evaluation, e.g. decoding or rewards)."""

    def __enter__(self):
        Tape._stack.append(None)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False


# ---------------------------------------------------------------------------
# primitive implementations: forward(arrays, attrs) -> (out, saved);
# backward(gout, arrays, out, saved, attrs) -> tuple of input grads
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(tag, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{tag}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _matmul_fwd(arrs, attrs):
    a, b = arrs
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    bt = np.swapaxes(b, -1, -2) if attrs.get("transpose_b") else b
    if a.shape[-1] != bt.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}"
                         + (" (second transposed)" if attrs.get("transpose_b") else ""))
    try:
        np.broadcast_shapes(a.shape[:-2], bt.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    return np.matmul(a, bt), None


def _matmul_bwd(g, arrs, out, saved, attrs):
    a, b = arrs
    if attrs.get("transpose_b"):
        ga = np.matmul(g, b)
        gb = np.matmul(np.swapaxes(g, -1, -2), a)
    else:
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _add_fwd(arrs, attrs):
    _broadcast_check("add", *arrs)
    return arrs[0] + arrs[1], None


def _add_bwd(g, arrs, out, saved, attrs):
    return _unbroadcast(g, arrs[0].shape), _unbroadcast(g, arrs[1].shape)


def _mul_fwd(arrs, attrs):
    _broadcast_check("mul", *arrs)
    return arrs[0] * arrs[1], None


def _mul_bwd(g, arrs, out, saved, attrs):
    a, b = arrs
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _sigmoid_fwd(arrs, attrs):
    x = arrs[0]
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out, None


def _sigmoid_bwd(g, arrs, out, saved, attrs):
    return (g * out * (1.0 - out),)


def _tanh_fwd(arrs, attrs):
    return np.tanh(arrs[0]), None


def _tanh_bwd(g, arrs, out, saved, attrs):
    return (g * (1.0 - out * out),)


def _softmax_fwd(arrs, attrs):
    x = arrs[0]
    if x.ndim < 1:
        raise ShapeError(f"softmax: needs at least 1-d input, got shape {x.shape}")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, arrs, out, saved, attrs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(arrs, attrs):
    x = arrs[0]
    if x.ndim < 1:
        raise ShapeError(f"log_softmax: needs at least 1-d input, got shape {x.shape}")
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), None


def _log_softmax_bwd(g, arrs, out, saved, attrs):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _concat_fwd(arrs, attrs):
    axis = attrs.get("axis", -1)
    nd = arrs[0].ndim
    ax = axis % nd
    for a in arrs[1:]:
        if a.ndim != nd or any(a.shape[i] != arrs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {arrs[0].shape} and {a.shape} differ off axis {axis}")
    sizes = [a.shape[ax] for a in arrs]
    return np.concatenate(arrs, axis=ax), np.cumsum(sizes)[:-1]


def _concat_bwd(g, arrs, out, saved, attrs):
    ax = attrs.get("axis", -1) % g.ndim
    return tuple(np.split(g, saved, axis=ax))


def _embedding_fwd(arrs, attrs):
    table = arrs[0]
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of shape {table.shape}")
    return table[ids], None


def _embedding_bwd(g, arrs, out, saved, attrs):
    table = arrs[0]
    gt = np.zeros_like(table)
    np.add.at(gt, attrs["ids"].reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


def _sum_fwd(arrs, attrs):
    return np.sum(arrs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None


def _sum_bwd(g, arrs, out, saved, attrs):
    x = arrs[0]
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _scale_fwd(arrs, attrs):
    return arrs[0] * attrs["c"], None


def _scale_bwd(g, arrs, out, saved, attrs):
    return (g * attrs["c"],)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "log_softmax": (_log_softmax_fwd, _log_softmax_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "embedding": (_embedding_fwd, _embedding_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "scale": (_scale_fwd, _scale_bwd),
}


def apply_primitive(tag: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``tag`` and append it to the active tape (if any)."""
    try:
        fwd, _ = PRIMITIVES[tag]
    except KeyError:
        raise ValueError(f"unknown primitive {tag!r}") from None
    arrs = [t.data for t in inputs]
    out, saved = fwd(arrs, attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{tag}: non-finite output")
    tape = Tape.current()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(tag, list(inputs), result, saved, attrs))
    return result


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] = ()) -> None:
    """Fill ``.grad`` with d(loss)/d(tensor) for every tensor in ``tape``.

    Tensors listed in ``wrt`` but absent from the record get zero gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {loss.node_id: loss}
    for node in reversed(tape.nodes):
        seen[node.output.node_id] = node.output
        for t in node.inputs:
            seen[t.node_id] = t
        g = grads.get(node.output.node_id)
        if g is None:
            continue
        _, bwd = PRIMITIVES[node.tag]
        in_grads = bwd(g, [t.data for t in node.inputs], node.output.data, node.saved, node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if not t.requires_grad:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi
    for nid, t in seen.items():
        g = grads.get(nid)
        t.grad = np.zeros_like(t.data) if g is None else g
        if not np.all(np.isfinite(t.grad)):
            raise NonFiniteError(f"non-finite gradient for {t!r}")
    for t in wrt:
        if t.node_id not in seen:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# thin wrappers
# ---------------------------------------------------------------------------

def matmul(a, b, transpose_b=False):
    return apply_primitive("matmul", [a, b], transpose_b=transpose_b)


def add(a, b):
    return apply_primitive("add", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def softmax(x):
    return apply_primitive("softmax", [x])


def log_softmax(x):
    return apply_primitive("log_softmax", [x])


def concat(xs, axis=-1):
    return apply_primitive("concat", list(xs), axis=axis)


def embedding(table, ids):
    return apply_primitive("embedding", [table], ids=np.asarray(ids, dtype=np.int64))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def scale(x, c):
    return apply_primitive("scale", [x], c=float(c))


def sub(a, b):
    return add(a, scale(b, -1.0))


# ---------------------------------------------------------------------------
# gradient checking and optimisation
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-5,
               atol: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar from the current values of ``params``. The
    relative error of each entry is ``|a - n| / max(|a|, |n|, atol)``; the
    floor keeps finite-difference rounding noise (~1e-11 absolute) on entries
    whose true gradient is ~0 from reading as a large relative error.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    with Tape() as tape:
        loss = f()
    backward(loss, tape, wrt=params)
    analytic = [p.grad.copy() for p in params]
    with no_grad():
        again = f().item()
    if again != loss.item():
        raise ValueError("grad_check: f is not deterministic")
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = f().item()
                flat[i] = orig - epsilon
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * epsilon)
                denom = max(abs(gflat[i]), abs(num), atol)
                worst = max(worst, abs(gflat[i] - num) / denom)
    return worst


class SGD:
    """Plain gradient descent update rule: ``p <- p - lr * g``."""

    def __call__(self, params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float):
        for p, g in zip(params, grads):
            p.data -= lr * g


def optimizer_step(params: Sequence[Tensor], lr: float, clip: float = 5.0, rule=None) -> float:
    """Clip the global gradient norm to ``clip``, apply ``rule``, zero grads.

    Returns the pre-clipping global norm.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if clip <= 0:
        raise ValueError("clip must be positive")
    for p in params:
        if p.grad is None:
            raise ValueError(f"missing gradient for {p!r}")
    norm = math.sqrt(float(np.sum([np.vdot(p.grad, p.grad) for p in params])))
    factor = 1.0 if norm <= clip else clip / norm
    grads = [p.grad * factor if factor != 1.0 else p.grad for p in params]
    (rule or SGD())(params, grads, lr)
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"non-finite parameter after update: {p!r}")
        p.grad = np.zeros_like(p.data)
    return norm
