"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every operation appends one node to the active tape, so the node list is
already topologically sorted and backward() is a single reversed sweep.
Nodes created from plain arrays are constants: they receive gradients but
propagate nothing.

Nondifferentiable ops (relu, abs, clip, where) can record a "branch token"
per call when the tape asks for it. finite_diff_check compares these
signatures between the two perturbed evaluations to detect a kink crossing,
which would invalidate the central-difference estimate at that coordinate.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

ArrayLike = "np.ndarray | float | int | Tensor"


class Tape:
    __slots__ = ("nodes", "record_branches", "_branches", "param_leaves")

    def __init__(self, record_branches: bool = False) -> None:
        self.nodes: list[Tensor] = []
        self.record_branches = record_branches
        self._branches: list[int] = []
        self.param_leaves: list[tuple[object, Tensor]] = []

    def _record(self, t: "Tensor") -> None:
        t.node_id = len(self.nodes)
        self.nodes.append(t)

    def note_branch(self, arr: np.ndarray) -> None:
        """Register a discrete decision so perturbed reruns can be compared."""
        if self.record_branches:
            self._branches.append(hash(np.ascontiguousarray(arr).tobytes()))

    def branch_signature(self) -> tuple[int, ...]:
        return tuple(self._branches)


class Tensor:
    __slots__ = ("value", "grad", "tape", "node_id", "_inputs", "_vjp")

    def __init__(
        self,
        value: np.ndarray,
        tape: Tape,
        inputs: tuple = (),
        vjp: Optional[Callable] = None,
    ) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self._inputs = inputs
        self._vjp = vjp
        tape._record(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    # arithmetic sugar; raw arrays and scalars are lifted to constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(constant(other, self.tape), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        n = self.value.size if axis is None else self.value.shape[axis]
        return tsum(self, axis=axis) * (1.0 / n)


def constant(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), tape)


def _lift(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x, tape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the pre-broadcast shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a.tape)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return Tensor(av + bv, a.tape, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a.tape)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return Tensor(av - bv, a.tape, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a.tape)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Tensor(av * bv, a.tape, (a, b), vjp)


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a.tape)
    av, bv = a.value, b.value

    def vjp(g):
        return (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        )

    return Tensor(av / bv, a.tape, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.value, a.tape, (a,), lambda g: (-g,))


def pow_const(a: Tensor, p: float) -> Tensor:
    av = a.value
    return Tensor(av ** p, a.tape, (a,), lambda g: (g * p * av ** (p - 1),))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return Tensor(out, a.tape, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    av = a.value
    return Tensor(np.log(av), a.tape, (a,), lambda g: (g / av,))


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)
    return Tensor(out, a.tape, (a,), lambda g: (g / (2.0 * out),))


def tsin(a: Tensor) -> Tensor:
    av = a.value
    return Tensor(np.sin(av), a.tape, (a,), lambda g: (g * np.cos(av),))


def tcos(a: Tensor) -> Tensor:
    av = a.value
    return Tensor(np.cos(av), a.tape, (a,), lambda g: (-g * np.sin(av),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0
    a.tape.note_branch(mask)
    return Tensor(np.where(mask, a.value, 0.0), a.tape, (a,), lambda g: (g * mask,))


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.value)
    a.tape.note_branch(s)
    return Tensor(np.abs(a.value), a.tape, (a,), lambda g: (g * s,))


def softplus(a: Tensor) -> Tensor:
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = np.exp(av - out)  # exp(x)/(1+exp(x)), stable for both signs
    return Tensor(out, a.tape, (a,), lambda g: (g * sig,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.value >= lo) & (a.value <= hi)
    a.tape.note_branch(inside)
    return Tensor(np.clip(a.value, lo, hi), a.tape, (a,), lambda g: (g * inside,))


def where(mask: np.ndarray, a: Tensor, b) -> Tensor:
    """Select by a boolean mask fixed at forward time."""
    mask = np.asarray(mask, dtype=bool)
    b = _lift(b, a.tape)
    a.tape.note_branch(mask)
    av, bv = a.value, b.value

    def vjp(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), av.shape),
            _unbroadcast(np.where(mask, 0.0, g), bv.shape),
        )

    return Tensor(np.where(mask, av, bv), a.tape, (a, b), vjp)


def matmul(a: Tensor, b) -> Tensor:
    b = _lift(b, a.tape)
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        vjp = lambda g: (g @ bv.T, av.T @ g)
    elif av.ndim == 2 and bv.ndim == 1:
        vjp = lambda g: (np.outer(g, bv), av.T @ g)
    elif av.ndim == 1 and bv.ndim == 2:
        vjp = lambda g: (g @ bv.T, np.outer(av, g))
    else:
        raise ValueError("matmul supports 1-D/2-D operands only")
    return Tensor(av @ bv, a.tape, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return Tensor(a.value.T, a.tape, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    orig = a.value.shape
    return Tensor(a.value.reshape(shape), a.tape, (a,), lambda g: (g.reshape(orig),))


def getitem(a: Tensor, idx) -> Tensor:
    orig_shape = a.value.shape

    def vjp(g):
        z = np.zeros(orig_shape)
        np.add.at(z, idx, g)
        return (z,)

    return Tensor(a.value[idx], a.tape, (a,), vjp)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup into a 2-D table; gradient scattered with bincount, which is
    far faster than np.add.at for the many-collision hash-grid case."""
    idx = np.asarray(idx)
    tv = table.value
    n_rows, n_feat = tv.shape
    flat = idx.ravel()

    def vjp(g):
        gflat = g.reshape(-1, n_feat)
        out = np.empty_like(tv)
        for f in range(n_feat):
            out[:, f] = np.bincount(flat, weights=gflat[:, f], minlength=n_rows)
        return (out,)

    return Tensor(tv[idx], table.tape, (table,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    av = a.value

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return Tensor(av.sum(axis=axis, keepdims=keepdims), a.tape, (a,), vjp)


def cumsum(a: Tensor, axis: int) -> Tensor:
    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return Tensor(np.cumsum(a.value, axis=axis), a.tape, (a,), vjp)


def concatenate(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = parts[0].tape
    parts = [_lift(p, tape) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([p.value for p in parts], axis=axis), tape, tuple(parts), vjp
    )


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    tape = parts[0].tape
    parts = [_lift(p, tape) for p in parts]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return Tensor(
        np.stack([p.value for p in parts], axis=axis), tape, tuple(parts), vjp
    )


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dLoss/dx on every tape node, then fold leaf gradients into
    any ParamStore parameters bound to this tape."""
    if loss.value.shape != ():
        raise ValueError("backward expects a scalar loss node")
    loss.grad = np.ones(())
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        if node.grad is None or node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for inp, g in zip(node._inputs, grads):
            if g is None:
                continue
            if inp.grad is None:
                inp.grad = np.zeros(inp.value.shape)
            inp.grad += g
    for param, leaf in tape.param_leaves:
        if leaf.grad is not None:
            param.grad += leaf.grad
