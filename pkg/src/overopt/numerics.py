"""Dense float64 tensors, a reverse-mode tape, and Adam.

Every tensor wraps a numpy array. A tensor that was produced on a :class:`Tape`
carries the id of its tape node; operations on tracked tensors append a node
whose backward rule maps the output gradient to input gradients. Nothing is
ever mutated in place, so a tape stays valid for as long as it is alive.

Example::

    tape = Tape()
    x = tape.watch(np.array([1.0, 2.0]))
    loss = sum_(tanh(x) * x)
    grads = tape.gradient(loss, [x])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are not conformable."""


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


def _check_finite(op: str, value: np.ndarray) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NumericError(f"{op}: non-finite output")
    return value


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    shape: tuple[int, ...]


class Tape:
    """Append-only record of operations; one tape per gradient computation."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}

    def watch(self, value) -> Tensor:
        """Register a leaf (typically a parameter) and return its tracked tensor."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        _check_finite("watch", data)
        self.nodes.append(_Node("leaf", (), None, data.shape))
        return Tensor(data, self, len(self.nodes) - 1)

    def _record(self, op, inputs, value, backward) -> Tensor:
        ids = tuple(t.node if t.tracked else -1 for t in inputs)
        self.nodes.append(_Node(op, ids, backward, value.shape))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(self, loss)

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` w.r.t. ``params``; zeros for params the loss never touched."""
        grads = backward(self, loss)
        return [grads.get(p.node, np.zeros(p.shape)) for p in params]


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for idx in range(loss.node, -1, -1):
        g = grads.get(idx)
        node = tape.nodes[idx]
        if g is None or node.backward is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if inp < 0 or gi is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    tape.gradients = grads
    return grads


# ----------------------------------------------------------------- helpers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands live on different tapes")
            tape = t.tape
    return tape


def _emit(op: str, inputs: tuple[Tensor, ...], value: np.ndarray, backward) -> Tensor:
    _check_finite(op, value)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape._record(op, inputs, value, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -------------------------------------------------------------- forward ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands (a vector on either side is promoted)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    ad, bd = a.data, b.data

    def back(g):
        g2 = g.reshape(ad.shape[:-1] + bd.shape[1:])
        a2 = ad if ad.ndim == 2 else ad[None, :]
        b2 = bd if bd.ndim == 2 else bd[:, None]
        gm = g2.reshape(a2.shape[0], b2.shape[1])
        return (gm @ b2.T).reshape(ad.shape), (a2.T @ gm).reshape(bd.shape)

    return _emit("matmul", (a, b), ad @ bd, back)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    _check_finite("sigmoid(input)", x.data)
    y = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), stable for any finite x."""
    x = as_tensor(x)
    xd = x.data
    y = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    s = _sigmoid(np.atleast_1d(xd)).reshape(xd.shape)
    return _emit("softplus", (x,), y, lambda g: (g * s,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _emit("exp", (x,), y, lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if not (x.data > 0).all():
        raise NumericError("log: input must be strictly positive")
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def _keep(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit("sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims),
                 lambda g: (_keep(g, shape, axis, keepdims).copy(),))


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]
    return _emit("mean", (x,), np.mean(x.data, axis=axis, keepdims=keepdims),
                 lambda g: (_keep(g, shape, axis, keepdims) / n,))


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_finite("logsumexp(input)", x.data)
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    shifted = np.exp(xd - m)
    total = shifted.sum(axis=axis, keepdims=True)
    y = np.log(total) + m
    soft = shifted / total
    out = y if keepdims else np.squeeze(y, axis=axis)
    return _emit("logsumexp", (x,), out,
                 lambda g: ((g if keepdims else np.expand_dims(g, axis)) * soft,))


def log_softmax(x, axis: int = -1) -> Tensor:
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


def min_over_axis(x, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Minimum along ``axis`` with the argmin; ties go to the lowest index.

    The gradient flows only into the selected element.
    """
    x = as_tensor(x)
    xd = x.data
    idx = np.argmin(xd, axis=axis)  # numpy returns the first occurrence
    vals = np.take_along_axis(xd, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        out = np.zeros_like(xd)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _emit("min_over_axis", (x,), vals, back), idx


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _emit("minimum", (a, b), np.where(pick_a, a.data, b.data),
                 lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clip", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _emit("reshape", (x,), y, lambda g: (g.reshape(old),))


# --------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(first_moment=[np.zeros_like(p) for p in params],
                   second_moment=[np.zeros_like(p) for p in params], **hyper)


def adam_update(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]
                ) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam step. Returns new arrays and a new state; inputs are untouched."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError(
            f"adam_update: {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moment)} moments")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or m.shape != p.shape:
            raise DimensionError(f"adam_update: param {p.shape} vs grad {g.shape}")
        _check_finite("adam_update", g)
        with np.errstate(over="ignore"):
            m = _check_finite("adam_update (first moment)", b1 * m + (1.0 - b1) * g)
            v = _check_finite("adam_update (second moment)", b2 * v + (1.0 - b2) * (g * g))
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params.append(_check_finite("adam_update",
                                        p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)))
        m_new.append(m)
        v_new.append(v)
    new_state = AdamState(state.learning_rate, b1, b2, state.epsilon, t, m_new, v_new)
    return new_params, new_state
