"""Dense tensors with tape-based reverse-mode automatic differentiation.

Values are stored as numpy arrays in a globally selected precision:
float32 for training throughput, float64 for gradient verification
(finite-difference checks are meaningless in float32). Operations
executed while a :class:`Tape` is active are recorded in execution
order, which is a topological order by construction; ``Tape.backward``
replays the records in reverse. Without an active tape nothing is
recorded, so inference runs without bookkeeping overhead.

Broadcasting follows numpy's trailing-axes rule only; anything else
requires an explicit reshape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradcheckReport",
    "tensor",
    "constant",
    "parameter",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "gradcheck",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """Select the engine precision (np.float32 or np.float64) for new tensors."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the engine precision (used for gradient verification)."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """A dense array plus autodiff metadata.

    ``requires_grad`` marks leaves whose gradient should be accumulated
    into ``.grad`` by a backward pass. ``_track`` marks tensors on some
    differentiable path (leaves with requires_grad, or outputs of
    recorded ops).
    """

    __slots__ = ("data", "grad", "requires_grad", "_track", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=get_default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._track = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{tag})"

    # operator sugar; constants are lifted to non-grad tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class OpRecord:
    name: str
    inputs: tuple
    output: Tensor
    backward: callable  # grad_out -> tuple of grads aligned with inputs (None allowed)


class Tape:
    """Ordered record of operations; context manager activating recording.

    Every record is appended after all producers of its inputs, so the
    list is topologically ordered by construction and the backward
    traversal is a single deterministic reverse sweep.
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

        The loss must be scalar (size 1). Intermediate gradients live in
        a transient map keyed by tensor identity; only tensors with
        ``requires_grad`` keep a ``.grad`` afterwards.
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            gout = grads.pop(id(rec.output), None)
            if gout is None:
                continue
            gins = rec.backward(gout)
            for inp, gin in zip(rec.inputs, gins):
                if gin is None or not isinstance(inp, Tensor) or not inp._track:
                    continue
                acc = grads.get(id(inp))
                if acc is None:
                    # guard against aliasing: closures may hand back gout
                    # itself (add) or views of it (reshape/broadcast)
                    if gin is gout or gin.base is not None or not gin.flags.owndata:
                        gin = np.array(gin)
                    grads[id(inp)] = gin
                else:
                    acc += gin
            if rec.output.requires_grad and gout is not None:
                rec.output.grad = gout if rec.output.grad is None else rec.output.grad + gout
        # flush surviving entries into leaf .grad slots
        leaves = {}
        for rec in self.records:
            for inp in rec.inputs:
                if isinstance(inp, Tensor) and inp.requires_grad:
                    leaves[id(inp)] = inp
        if loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is not None:
                leaf.grad = g if leaf.grad is None else leaf.grad + g


def _record(name, inputs, out_data, backward) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t._track for t in inputs):
        out._track = True
        tape.records.append(OpRecord(name, tuple(inputs), out, backward))
    return out


def _check_broadcast(name, a_shape, b_shape):
    for da, db in zip(reversed(a_shape), reversed(b_shape)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{name}: shapes {a_shape} and {b_shape} do not broadcast")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over axes introduced or stretched by broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _record("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _record("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _record("mul", (a, b), a.data * b.data, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return (ga, gb)

    return _record("div", (a, b), a.data / b.data, backward)


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def backward(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _record("power", (a,), np.power(a.data, p), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out_data),)

    return _record("sqrt", (a,), out_data, backward)


def absolute(a: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(a.data),)

    return _record("abs", (a,), np.abs(a.data), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("maximum", a.shape, b.shape)
    pick_a = a.data >= b.data

    def backward(g):
        return (
            _unbroadcast(g * pick_a, a.shape),
            _unbroadcast(g * (~pick_a), b.shape),
        )

    return _record("maximum", (a, b), np.maximum(a.data, b.data), backward)


# ---------------------------------------------------------------------------
# transcendental / activations
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _record("exp", (a,), out_data, lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _record("tanh", (a,), out_data, lambda g: (g * (1.0 - out_data * out_data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-softplus(-x)): stable for both tails, no fancy indexing
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid(a.data)
    return _record("sigmoid", (a,), out_data, lambda g: (g * out_data * (1.0 - out_data),))


def softplus(a: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, a.data)
    return _record("softplus", (a,), out_data, lambda g: (g * _sigmoid(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out_data = a.data * s

    def backward(g):
        return (g * (s + out_data * (1.0 - s)),)

    return _record("silu", (a,), out_data, backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _record("softmax", (a,), out_data, backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out_data, backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if a.ndim else 1
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record("mean", (a,), out_data, backward)


def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient flows to the (first) argmax entries."""
    ax = axis % a.ndim
    idx = a.data.argmax(axis=ax, keepdims=True)
    out_data = np.take_along_axis(a.data, idx, axis=ax)
    if not keepdims:
        out_data = out_data.squeeze(axis=ax)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g, axis=ax)
        return (ga,)

    return _record("max", (a,), out_data, backward)


# ---------------------------------------------------------------------------
# shape & indexing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=ax), backward)


def split(a: Tensor, sections, axis: int = 0) -> list[Tensor]:
    """Split into chunks of the given sizes along an axis."""
    ax = axis % a.ndim
    if int(np.sum(sections)) != a.shape[ax]:
        raise ShapeError(f"split: sections {sections} do not cover axis of size {a.shape[ax]}")
    offsets = np.cumsum(sections)[:-1]
    pieces = np.split(a.data, offsets, axis=ax)
    outs = []
    start = 0
    for piece in pieces:
        lo = start
        hi = start + piece.shape[ax]
        start = hi

        def backward(g, lo=lo, hi=hi):
            ga = np.zeros_like(a.data)
            sl = [slice(None)] * a.ndim
            sl[ax] = slice(lo, hi)
            ga[tuple(sl)] = g
            return (ga,)

        outs.append(_record("split", (a,), piece.copy(), backward))
    return outs


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along an axis by integer index; backward scatter-adds."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take: indices must be integers")
    ax = axis % a.ndim
    if ax != 0 and idx.ndim != 1:
        raise ShapeError("take: indices must be 1-D when axis != 0")
    out_data = np.take(a.data, idx, axis=ax)

    def backward(g):
        ga = np.zeros_like(a.data)
        if ax == 0:
            np.add.at(ga, idx, g)
        else:
            moved = np.moveaxis(ga, ax, 0)
            np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (ga,)

    return _record("take", (a,), out_data, backward)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where mask is True by a constant."""
    m = np.asarray(mask, dtype=bool)
    _check_broadcast("masked_fill", a.shape, m.shape)
    m = np.broadcast_to(m, a.shape)
    out_data = np.where(m, np.asarray(value, dtype=a.dtype), a.data)

    def backward(g):
        return (np.where(m, 0.0, g),)

    return _record("masked_fill", (a,), out_data, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    _check_broadcast("matmul(batch)", a.shape[:-2], b.shape[:-2])
    need_a, need_b = a._track, b._track

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if need_b else None
        return (ga, gb)

    return _record("matmul", (a, b), a.data @ b.data, backward)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    unreachable: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.unreachable and np.isfinite(self.max_rel_error)


def gradcheck(loss_fn, params: dict, eps: float = 1e-5) -> GradcheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``loss_fn`` is a zero-argument closure over ``params`` (a mapping
    name -> Tensor) returning a scalar Tensor. Run under float64: the
    comparison tolerance cannot be met in float32. Parameters that
    receive no gradient are reported as unreachable rather than silently
    treated as zero.
    """
    if get_default_dtype() is not np.float64:
        raise RuntimeError("gradcheck requires the float64 engine mode")
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    report = GradcheckReport(max_rel_error=0.0)
    for name, p in params.items():
        if p.grad is None:
            report.unreachable.append(name)
            report.per_param[name] = ("zero-gradient, unreachable", None)
            continue
        analytic = p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
        report.per_param[name] = (rel, numeric)
        report.max_rel_error = max(report.max_rel_error, rel)
    return report
