"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Tensors wrap a numpy array (float32 by default, float64 for gradient
checking). Operations record a backward rule onto the innermost active
``Tape``; with no tape active they are plain value computations, which keeps
inference and benchmarking cheap. Broadcasting is deliberately narrow: two
operands must have equal shapes, or one may be a 1-D vector applied along the
other's last axis.
"""

from __future__ import annotations

import weakref
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError

DEFAULT_DTYPE = np.float32

DIV_GUARD = 1e-12  # |denominator| is clamped to at least this

_tape_stack: list["Tape"] = []


def _active_tape() -> Optional["Tape"]:
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """N-d float array, optionally carrying a gradient.

    ``data`` is the value (numpy array, C-order on construction), ``grad`` is
    lazily allocated by the backward pass and always matches ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        # weakly held so a finished step's graph is freed by refcounting
        # alone, without waiting for a cycle-collector pass
        self._tape: Optional[weakref.ref] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)


class Tape:
    """Ordered record of operations for one backward pass.

    Operations append themselves in forward order; ``backward`` replays the
    records exactly once in reverse, accumulating gradients additively into
    every contributing tensor.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise DimensionError(f"backward: loss must be a scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, rule in reversed(self._records):
            if out.grad is not None:
                rule(out.grad)


def backward(loss: Tensor):
    """Run the backward pass of the tape that recorded ``loss``."""
    tape = loss._tape() if loss._tape is not None else None
    if tape is None:
        raise DimensionError("backward: loss was not recorded on a live tape")
    tape.backward(loss)


def _record(out: Tensor, tape: Tape, rule: Callable[[np.ndarray], None]):
    out.requires_grad = True
    out._tape = weakref.ref(tape)
    tape._records.append((out, rule))


def _wants_grad(*tensors) -> Optional[Tape]:
    tape = _active_tape()
    if tape is None:
        return None
    if any(isinstance(t, Tensor) and t.requires_grad for t in tensors):
        return tape
    return None


def _accum(t: Tensor, g: np.ndarray, own: bool = False):
    """Add ``g`` into ``t.grad``. ``own=True`` promises ``g`` is a fresh array
    no other rule will touch, so the first contribution can take it as-is."""
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g if own and g.flags.writeable and g.base is None else g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul: batch dimensions disagree for {a.shape} and {b.shape}") from exc
    out = Tensor(a.data @ b.data)
    tape = _wants_grad(a, b)
    if tape is not None:
        def rule(g, a=a, b=b):
            if a.requires_grad:
                _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape), own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape), own=True)
        _record(out, tape, rule)
    return out


# ---------------------------------------------------------------------------
# elementwise ops (equal shapes or last-axis vector broadcast)

def _check_elementwise(a: Tensor, b: Tensor, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return
    raise DimensionError(f"{op}: shapes {sa} and {sb} are neither equal nor a last-axis vector broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data)
    tape = _wants_grad(a, b)
    if tape is not None:
        def rule(g, a=a, b=b):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))
        _record(out, tape, rule)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    out = Tensor(a.data - b.data)
    tape = _wants_grad(a, b)
    if tape is not None:
        def rule(g, a=a, b=b):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(-g, b.shape))
        _record(out, tape, rule)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data)
    tape = _wants_grad(a, b)
    if tape is not None:
        def rule(g, a=a, b=b):
            _accum(a, _unbroadcast(g * b.data, a.shape), own=True)
            _accum(b, _unbroadcast(g * a.data, b.shape), own=True)
        _record(out, tape, rule)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient; |denominator| is clamped to DIV_GUARD."""
    _check_elementwise(a, b, "div")
    den = b.data
    safe = np.where(np.abs(den) < DIV_GUARD, np.copysign(DIV_GUARD, den), den)
    out = Tensor(a.data / safe)
    tape = _wants_grad(a, b)
    if tape is not None:
        def rule(g, a=a, b=b, safe=safe):
            _accum(a, _unbroadcast(g / safe, a.shape), own=True)
            _accum(b, _unbroadcast(-g * a.data / (safe * safe), b.shape), own=True)
        _record(out, tape, rule)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (the scalar takes no gradient)."""
    c = float(c)
    out = Tensor(x.data * x.data.dtype.type(c))
    tape = _wants_grad(x)
    if tape is not None:
        def rule(g, x=x, c=c):
            _accum(x, g * c, own=True)
        _record(out, tape, rule)
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + x.data.dtype.type(float(c)))
    tape = _wants_grad(x)
    if tape is not None:
        def rule(g, x=x):
            _accum(x, g)
        _record(out, tape, rule)
    return out


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # stable for large |x|: exp is only ever taken of a non-positive value
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(_sigmoid_values(x.data))
    tape = _wants_grad(x)
    if tape is not None:
        def rule(g, x=x, y=out.data):
            _accum(x, g * y * (1.0 - y), own=True)
        _record(out, tape, rule)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_values(x.data)
    out = Tensor(x.data * s)
    tape = _wants_grad(x)
    if tape is not None:
        def rule(g, x=x, s=s):
            _accum(x, g * s * (1.0 + x.data * (1.0 - s)), own=True)
        _record(out, tape, rule)
    return out


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; negatives are clamped to zero first."""
    y = np.sqrt(np.maximum(x.data, 0.0))
    out = Tensor(y)
    tape = _wants_grad(x)
    if tape is not None:
        def rule(g, x=x, y=y):
            _accum(x, g * 0.5 / np.maximum(y, DIV_GUARD), own=True)
        _record(out, tape, rule)
    return out


def absval(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    tape = _wants_grad(x)
    if tape is not None:
        def rule(g, x=x):
            _accum(x, g * np.sign(x.data), own=True)
        _record(out, tape, rule)
    return out


# ---------------------------------------------------------------------------
# normalization / softmax / loss

def rmsnorm(x: Tensor, gain: Tensor, eps_rms: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by ``gain``.

    y_i = x_i / sqrt(mean(x^2) + eps_rms) * gain_i. The eps guard keeps the
    all-zeros row finite; exact zeros stay exact zeros.
    """
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("rmsnorm: last axis must be non-empty")
    if gain.ndim != 1 or gain.shape[0] != d:
        raise DimensionError(f"rmsnorm: gain shape {gain.shape} does not match last axis of {x.shape}")
    if eps_rms <= 0:
        raise DimensionError("rmsnorm: eps_rms must be positive")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + x.data.dtype.type(eps_rms))
    out = Tensor(x.data * r * gain.data)
    tape = _wants_grad(x, gain)
    if tape is not None:
        def rule(g, x=x, gain=gain, r=r, d=d):
            gg = g * gain.data
            if x.requires_grad:
                dot = np.sum(gg * x.data, axis=-1, keepdims=True)
                _accum(x, r * gg - x.data * (r ** 3 / d) * dot, own=True)
            if gain.requires_grad:
                _accum(gain, (g * x.data * r).reshape(-1, d).sum(axis=0), own=True)
        _record(out, tape, rule)
    return out


def softmax_rows(x: Tensor, additive_mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.

    ``additive_mask`` is a constant array (no gradient) added to the logits
    before normalization; -inf entries get exactly zero weight.
    """
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / np.sum(e, axis=-1, keepdims=True))
    tape = _wants_grad(x)
    if tape is not None:
        def rule(g, x=x, y=out.data):
            _accum(x, y * (g - np.sum(g * y, axis=-1, keepdims=True)), own=True)
        _record(out, tape, rule)
    return out


def cross_entropy_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean cross-entropy between rows of logits and integer targets.

    ``targets`` has the shape of ``logits`` minus the last axis. ``weights``
    (same shape as targets, optional) selects/weights positions; the result is
    the weighted mean. Uses the log-sum-exp stabilization.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"cross_entropy_logits: target shape {targets.shape} does not match logits {logits.shape}")
    vocab = logits.shape[-1]
    if targets.size == 0:
        raise ValueError("cross_entropy_logits: empty batch")
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"cross_entropy_logits: target id out of range [0, {vocab})")
    flat = logits.data.reshape(-1, vocab)
    t = targets.reshape(-1).astype(np.int64)
    n_rows = flat.shape[0]
    if weights is None:
        w = np.ones(n_rows, dtype=flat.dtype)
    else:
        w = np.asarray(weights, dtype=flat.dtype).reshape(-1)
        if w.shape[0] != n_rows:
            raise DimensionError("cross_entropy_logits: weights shape does not match targets")
    total_w = float(w.sum())
    if total_w <= 0:
        raise ValueError("cross_entropy_logits: no positions selected by weights")
    m = np.max(flat, axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(flat - m), axis=-1))
    per_row = lse - flat[np.arange(n_rows), t]
    out = Tensor(np.asarray(np.sum(per_row * w) / total_w, dtype=flat.dtype))
    tape = _wants_grad(logits)
    if tape is not None:
        def rule(g, logits=logits, flat=flat, t=t, w=w, total_w=total_w, m=m):
            p = np.exp(flat - m)
            p /= np.sum(p, axis=-1, keepdims=True)
            p[np.arange(len(t)), t] -= 1.0
            p *= (w / total_w)[:, None] * g
            _accum(logits, p.reshape(logits.shape), own=True)
        _record(out, tape, rule)
    return out


# ---------------------------------------------------------------------------
# reductions / reshaping / gather

def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))
    tape = _wants_grad(x)
    if tape is not None:
        def rule(g, x=x):
            _accum(x, np.broadcast_to(g, x.shape))
        _record(out, tape, rule)
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))
    tape = _wants_grad(x)
    if tape is not None:
        def rule(g, x=x, n=n):
            _accum(x, np.broadcast_to(g / n, x.shape))
        _record(out, tape, rule)
    return out


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))
    tape = _wants_grad(x)
    if tape is not None:
        inv = None if axes is None else np.argsort(axes)
        def rule(g, x=x, inv=inv):
            _accum(x, np.transpose(g, inv))
        _record(out, tape, rule)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    tape = _wants_grad(x)
    if tape is not None:
        def rule(g, x=x):
            _accum(x, g.reshape(x.shape))
        _record(out, tape, rule)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer index array ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding_lookup: id out of range [0, {vocab})")
    out = Tensor(table.data[ids])
    tape = _wants_grad(table)
    if tape is not None:
        def rule(g, table=table, ids=ids):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accum(table, gt, own=True)
        _record(out, tape, rule)
    return out


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last_axis: leading shapes {a.shape} and {b.shape} disagree")
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    tape = _wants_grad(a, b)
    if tape is not None:
        split = a.shape[-1]
        def rule(g, a=a, b=b, split=split):
            _accum(a, g[..., :split])
            _accum(b, g[..., split:])
        _record(out, tape, rule)
    return out
