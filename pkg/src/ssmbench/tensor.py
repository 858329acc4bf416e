"""Dense float64 tensors with reverse-mode autodiff on a Wengert-list tape.

Every forward op runs in 64-bit, checks its output for NaN/Inf (an error,
never a silent value), and appends a backward rule to the active tape when
any input requires gradients. Recording order is execution order, so the
tape is topologically sorted by construction and backward is a single
reverse sweep.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, list]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward was called on a detached or already-consumed graph."""


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked for gradients.

    ``grad`` is populated on leaves (tensors not produced by a recorded op)
    by :func:`backward`; it always has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None  # tape that produced this tensor

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar; full rules live in the module-level ops
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

    def exp(self) -> "Tensor":
        return exp(self)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    """One recorded op: operand refs, output ref, and its backward rule."""

    inputs: tuple
    output: Tensor
    rule: BackwardRule


@dataclass
class Tape:
    """Ordered op list for one forward pass; freed after backward."""

    entries: list = field(default_factory=list)
    consumed: bool = False


_active_tape: Optional[Tape] = None
_grad_enabled: bool = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def from_op(data: np.ndarray, inputs: Iterable[ArrayLike], rule: BackwardRule,
            op: str = "op") -> Tensor:
    """Wrap a computed array as a Tensor, recording ``rule`` on the tape.

    ``rule`` maps the output gradient to one gradient (or None) per input,
    each already reduced to the input's shape. This is the hook fused ops
    (e.g. the selective scan) use to register a handwritten backward.
    """
    global _active_tape
    _check_finite(data, op)
    inputs = tuple(as_tensor(t) for t in inputs)
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        if _active_tape is None or _active_tape.consumed:
            _active_tape = Tape()
        out.requires_grad = True
        out._tape = _active_tape
        _active_tape.entries.append(TapeEntry(inputs, out, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return from_op(out, (a, b), rule, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return from_op(out, (a, b), rule, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * b.data

    def rule(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return from_op(out, (a, b), rule, "mul")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def rule(g):
        return (g * out,)

    return from_op(out, (a,), rule, "exp")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def rule(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return from_op(out, (a,), rule, "silu")


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def rule(g):
        return (g * _sigmoid(a.data),)

    return from_op(out, (a,), rule, "softplus")


def power(a: ArrayLike, p: float) -> Tensor:
    """Elementwise a**p for a constant real exponent."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data ** p

    def rule(g):
        return (g * p * a.data ** (p - 1.0),)

    return from_op(out, (a,), rule, "power")


_ELEMENTWISE_UNARY = {"exp": exp, "silu": silu, "softplus": softplus}
_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """Dispatch table over the supported elementwise ops."""
    if op_kind in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"elementwise '{op_kind}' needs two operands")
        return _ELEMENTWISE_BINARY[op_kind](a, b)
    if op_kind in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"elementwise '{op_kind}' takes one operand")
        return _ELEMENTWISE_UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product; operands may carry leading batch dims (numpy rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return from_op(out, (a, b), rule, "matmul")


def _reduce(a: Tensor, axis, keepdims, kind: str) -> Tensor:
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ValueError(f"{kind}: axis {axis} out of range for rank {a.ndim}")
    fn = np.sum if kind == "sum" else np.mean
    out = fn(a.data, axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]
    scale = 1.0 if kind == "sum" else 1.0 / count

    def rule(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, a.shape).copy(),)

    return from_op(np.asarray(out), (a,), rule, kind)


def reduce_sum(a: ArrayLike, axis=None, keepdims=False) -> Tensor:
    return _reduce(as_tensor(a), axis, keepdims, "sum")


def reduce_mean(a: ArrayLike, axis=None, keepdims=False) -> Tensor:
    return _reduce(as_tensor(a), axis, keepdims, "mean")


def reduce(op_kind: str, a: ArrayLike, axis=None) -> Tensor:
    if op_kind == "sum":
        return reduce_sum(a, axis=axis)
    if op_kind == "mean":
        return reduce_mean(a, axis=axis)
    raise ValueError(f"unknown reduce op {op_kind!r}")


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
    out = a.data.reshape(shape)

    def rule(g):
        return (g.reshape(a.shape),)

    return from_op(out, (a,), rule, "reshape")


def transpose(a: ArrayLike, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def rule(g):
        return (np.transpose(g, inv),)

    return from_op(out, (a,), rule, "transpose")


def take(a: ArrayLike, indices, axis: int = 0) -> Tensor:
    """Select along ``axis`` with an integer index array (scatter-add backward)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def rule(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return from_op(out, (a,), rule, "take")


def pad(a: ArrayLike, pads) -> Tensor:
    """Zero-pad; ``pads`` is a (before, after) pair per axis."""
    a = as_tensor(a)
    pads = tuple((int(b), int(e)) for b, e in pads)
    out = np.pad(a.data, pads)
    sl = tuple(slice(b, b + n) for (b, _), n in zip(pads, a.shape))

    def rule(g):
        return (g[sl],)

    return from_op(out, (a,), rule, "pad")


def softmax(a: ArrayLike) -> Tensor:
    """Stable softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return from_op(out, (a,), rule, "softmax")


def softmax_cross_entropy(logits: ArrayLike, labels: Sequence[int]) -> Tensor:
    """Mean NLL of integer labels under softmax(logits), log-sum-exp stabilized."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    out = np.asarray(nll.mean())
    probs = np.exp(z - lse[:, None])

    def rule(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        return (gl * (g / n),)

    return from_op(out, (logits,), rule, "softmax_cross_entropy")


def backward(loss: Tensor) -> None:
    """Reverse sweep: fills ``grad`` on every leaf that requires it.

    The tape is consumed and freed; calling backward twice on the same
    tape is an error.
    """
    global _active_tape
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise TapeError(f"backward needs a scalar loss, got shape {shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not connected to a tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for t, gt in zip(entry.inputs, entry.rule(g)):
            if gt is None or not t.requires_grad:
                continue
            gt = np.asarray(gt, dtype=np.float64)
            if t._tape is not tape:  # leaf w.r.t. this tape
                t.grad = gt.copy() if t.grad is None else t.grad + gt
            else:
                acc = grads.get(id(t))
                grads[id(t)] = gt if acc is None else acc + gt

    tape.consumed = True
    tape.entries.clear()
    if _active_tape is tape:
        _active_tape = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
