"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Recording only happens inside an active :class:`Tape` context; outside of
one every primitive runs in no-grad mode. This keeps inference cheap and
makes the set of differentiated computations explicit::

    x = Tensor([3.0], requires_grad=True)
    with Tape():
        y = x.square().sum()
    y.backward()
    x.grad  # array([6.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operands of a primitive do not conform."""


class DomainError(ValueError):
    """A primitive was evaluated outside its domain (log/sqrt of x <= 0)."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a value or gradient."""


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar; every method dispatches to a registered primitive
    def __add__(self, other):
        return apply("add", [self, as_tensor(other)])

    def __radd__(self, other):
        return apply("add", [as_tensor(other), self])

    def __sub__(self, other):
        return apply("sub", [self, as_tensor(other)])

    def __rsub__(self, other):
        return apply("sub", [as_tensor(other), self])

    def __mul__(self, other):
        return apply("mul", [self, as_tensor(other)])

    def __rmul__(self, other):
        return apply("mul", [as_tensor(other), self])

    def __truediv__(self, other):
        return apply("div", [self, as_tensor(other)])

    def __rtruediv__(self, other):
        return apply("div", [as_tensor(other), self])

    def __neg__(self):
        return apply("neg", [self])

    def __matmul__(self, other):
        return apply("matmul", [self, as_tensor(other)])

    def exp(self):
        return apply("exp", [self])

    def log(self):
        return apply("log", [self])

    def square(self):
        return apply("square", [self])

    def sqrt(self):
        return apply("sqrt", [self])

    def softplus(self):
        return apply("softplus", [self])

    def relu(self):
        return apply("relu", [self])

    def sum(self, axis: int | None = None):
        return apply("sum", [self], axis=axis)

    def mean(self, axis: int | None = None):
        return apply("mean", [self], axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=tuple(shape))

    def broadcast_to(self, shape):
        return apply("broadcast", [self], shape=tuple(shape))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered log of primitive applications, usable as a context manager.

    Tapes are thread-confined: entering one affects only the current thread.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        assert stack and stack[-1] is self, "tape contexts must nest"
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        for rec in self.records:
            rec.output._tape = None
        self.records.clear()


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

ForwardFn = Callable[..., tuple[np.ndarray, dict]]
BackwardFn = Callable[[np.ndarray, Sequence[np.ndarray], np.ndarray, dict], list]

_PRIMITIVES: dict[str, tuple[int, ForwardFn, BackwardFn]] = {}


def primitive(name: str, arity: int):
    def register(pair):
        fwd, bwd = pair
        _PRIMITIVES[name] = (arity, fwd, bwd)
        return pair

    return register


def primitives() -> tuple[str, ...]:
    return tuple(_PRIMITIVES)


def _broadcast_kind(op: str, a: np.ndarray, b: np.ndarray) -> str:
    """Classify how two operands line up; only a few patterns are legal."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "b_row"
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "a_row"
    raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, kind: str, which: str) -> np.ndarray:
    if kind == "same":
        return grad
    if kind == f"{which}_scalar":
        return np.asarray(grad.sum())
    if kind == f"{which}_row":
        return grad.sum(axis=0)
    return grad


def _binary(op: str, fn, dfa, dfb):
    def fwd(a, b):
        kind = _broadcast_kind(op, a, b)
        return fn(a, b), {"kind": kind}

    def bwd(g, inputs, out, saved):
        a, b = inputs
        kind = saved["kind"]
        ga = _unbroadcast(dfa(g, a, b, out), kind, "a")
        gb = _unbroadcast(dfb(g, a, b, out), kind, "b")
        return [ga, gb]

    primitive(op, 2)((fwd, bwd))


_binary("add", np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)
_binary("sub", np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)
_binary("mul", np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)
_binary("div", np.divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b)


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot combine shapes {a.shape} and {b.shape}")
    return a @ b, {}


def _matmul_bwd(g, inputs, out, saved):
    a, b = inputs
    return [g @ b.T, a.T @ g]


primitive("matmul", 2)((_matmul_fwd, _matmul_bwd))


def _unary(op: str, fn, dfn, check=None):
    def fwd(a):
        if check is not None:
            check(a)
        return fn(a), {}

    def bwd(g, inputs, out, saved):
        return [g * dfn(inputs[0], out)]

    primitive(op, 1)((fwd, bwd))


def _positive(op):
    def check(a):
        if np.any(a <= 0.0):
            raise DomainError(f"{op}: input must be strictly positive (min {a.min()!r})")

    return check


def _softplus(a):
    return np.logaddexp(0.0, a)


_unary("neg", np.negative, lambda a, o: -1.0)
_unary("exp", np.exp, lambda a, o: o)
_unary("log", np.log, lambda a, o: 1.0 / a, _positive("log"))
_unary("square", np.square, lambda a, o: 2.0 * a)
_unary("sqrt", np.sqrt, lambda a, o: 0.5 / o, _positive("sqrt"))
_unary("softplus", _softplus, lambda a, o: expit(a))
_unary("relu", lambda a: np.maximum(a, 0.0), lambda a, o: (a > 0.0).astype(np.float64))


def _sum_fwd(a, axis=None):
    return np.asarray(a.sum(axis=axis)), {"axis": axis, "shape": a.shape}


def _sum_bwd(g, inputs, out, saved):
    axis = saved["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, saved["shape"]).copy()]


def _mean_fwd(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    return np.asarray(a.mean(axis=axis)), {"axis": axis, "shape": a.shape, "n": n}


def _mean_bwd(g, inputs, out, saved):
    axis = saved["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g / saved["n"], saved["shape"]).copy()]


primitive("sum", 1)((_sum_fwd, _sum_bwd))
primitive("mean", 1)((_mean_fwd, _mean_bwd))


def _reshape_fwd(a, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return a.reshape(shape), {"shape": a.shape}


def _reshape_bwd(g, inputs, out, saved):
    return [g.reshape(saved["shape"])]


primitive("reshape", 1)((_reshape_fwd, _reshape_bwd))


def _broadcast_fwd(a, shape):
    shape = tuple(shape)
    if a.ndim == 0:
        kind = "a_scalar"
    elif a.ndim == 1 and len(shape) == 2 and shape[1] == a.shape[0]:
        kind = "a_row"
    elif a.shape == shape:
        kind = "same"
    else:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}")
    return np.broadcast_to(a, shape).copy(), {"kind": kind}


def _broadcast_bwd(g, inputs, out, saved):
    return [_unbroadcast(g, saved["kind"], "a")]


primitive("broadcast", 1)((_broadcast_fwd, _broadcast_bwd))


def apply(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``op`` and record it on the active tape if needed."""
    try:
        arity, fwd, _ = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}; known: {sorted(_PRIMITIVES)}") from None
    if len(inputs) != arity:
        raise ValueError(f"{op}: expected {arity} inputs, got {len(inputs)}")
    arrays = [t.data for t in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        data, saved = fwd(*arrays, **attrs)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out._index = -1
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.grad = np.zeros_like(data)
        out._tape = tape
        out._index = len(tape.records)
        tape.records.append(Record(op, tuple(inputs), out, saved))
    return out


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(t) into ``t.grad`` for every reachable tensor.

    Calling this twice without zeroing gradients accumulates twice.
    """
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    tape = output._tape
    if tape is None:
        raise RuntimeError("backward: output was not recorded on a tape")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    touched: dict[int, Tensor] = {id(output): output}
    for rec in reversed(tape.records[: output._index + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        _, _, bwd = _PRIMITIVES[rec.op]
        in_grads = bwd(g, [t.data for t in rec.inputs], rec.output.data, rec.saved)
        for t, gi in zip(rec.inputs, in_grads):
            if not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)
                touched[key] = t
        rec.output.grad += g
    # leaves (tensors not produced on this tape) receive what remains
    for key, g in grads.items():
        t = touched[key]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("backward: non-finite gradient")
        t.grad += g.reshape(t.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between the taped gradient and central differences.

    The error per coordinate is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    probe = Tensor(x.data, requires_grad=True)
    with Tape():
        out = f(probe)
        backward(out)
    analytic = probe.grad
    base = x.data
    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        hi = base.copy().reshape(-1)
        lo = base.copy().reshape(-1)
        hi[i] += step
        lo[i] -= step
        f_hi = f(Tensor(hi.reshape(base.shape))).item()
        f_lo = f(Tensor(lo.reshape(base.shape))).item()
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NonFiniteError("grad_check: non-finite function value")
        flat[i] = (f_hi - f_lo) / (2.0 * step)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))
