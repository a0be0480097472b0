"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy array (float64 by default, float32 opt-in). Operations
executed while a Tape is active are recorded in execution order; Tape.backward
replays the records in reverse, accumulating gradients deterministically.
Broadcasting is restricted to leading batch axes and scalar operands.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation precondition was violated."""


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape():
    """The innermost active Tape, or None outside any `with Tape():` block."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records operations for one reverse-mode differentiation pass.

    A tape is single-writer: use one tape per thread. Records are kept in
    execution order, which fixes the gradient accumulation order.
    """

    def __init__(self):
        self._records = []  # (out, [(input, pull_fn), ...]) in execution order
        self._on_tape = set()  # ids of tensors produced by recorded ops

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def _tracked(self, t):
        return t.requires_grad or id(t) in self._on_tape

    def record(self, out, pulls):
        """Append one op: pulls maps output grads to input grad contributions."""
        self._records.append((out, pulls))
        self._on_tape.add(id(out))
        out.tape_id = id(self)

    def clear(self):
        """Release all recorded state. Idempotent."""
        self._records.clear()
        self._on_tape.clear()

    def backward(self, loss):
        """Gradients of a scalar loss w.r.t. every requires_grad leaf.

        Returns a dict keyed by leaf Tensor (identity). Fan-out accumulates
        additively; walk order is the reverse of the recorded order.
        """
        if loss.data.shape != ():
            raise ContractError(
                f"backward expects a scalar loss, got shape {loss.data.shape}"
            )
        if id(loss) not in self._on_tape and not loss.requires_grad:
            raise ContractError("loss is not on this tape")
        grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
        leaf_grads = {}
        if loss.requires_grad:
            leaf_grads[loss] = grads[id(loss)]
        for out, pulls in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, pull in pulls:
                contrib = pull(g)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
                if inp.requires_grad and id(inp) not in self._on_tape:
                    leaf_grads[inp] = grads[key]
        return leaf_grads


class Tensor:
    """Dense n-dimensional array, optionally participating in a tape.

    `data` is a numpy array; `requires_grad` marks differentiation leaves;
    `tape_id` identifies the tape that recorded the producing op, if any.
    """

    __slots__ = ("data", "requires_grad", "tape_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out, pulls):
    """Record an op if a tape is active and any input is tracked."""
    tape = active_tape()
    if tape is None:
        return out
    live = [(inp, pull) for inp, pull in pulls if tape._tracked(inp)]
    if live:
        tape.record(out, live)
    return out


def _check_broadcast(a_shape, b_shape):
    """Allow equal shapes, scalar operands, or leading-batch-axis broadcast.

    Leading-axis broadcast means one shape is a suffix of the other, e.g.
    (n, d) + (d,). Anything else (numpy-style size-1 stretching) is rejected
    to keep shape bugs loud.
    """
    if a_shape == b_shape or a_shape == () or b_shape == ():
        return
    small, big = (a_shape, b_shape) if len(a_shape) < len(b_shape) else (b_shape, a_shape)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast")


def _reduce_to(grad, shape):
    """Sum a broadcasted gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise family
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)
    return _record(out, [
        (a, lambda g: _reduce_to(g, a.data.shape)),
        (b, lambda g: _reduce_to(g, b.data.shape)),
    ])


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)
    return _record(out, [
        (a, lambda g: _reduce_to(g, a.data.shape)),
        (b, lambda g: _reduce_to(-g, b.data.shape)),
    ])


def scale(x, c):
    """Multiply by a python scalar constant (not differentiated through c)."""
    x = _as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c)
    return _record(out, [(x, lambda g: g * c)])


def hadamard(a, b):
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)
    return _record(out, [
        (a, lambda g: _reduce_to(g * b.data, a.data.shape)),
        (b, lambda g: _reduce_to(g * a.data, b.data.shape)),
    ])


def gelu(x):
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = _as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi)

    def pull(g):
        dens = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return g * (phi + x.data * dens)

    return _record(out, [(x, pull)])


def mean(x):
    x = _as_tensor(x)
    n = x.data.size
    out = Tensor(x.data.mean())
    return _record(out, [(x, lambda g: np.full_like(x.data, g / n))])


def tsum(x):
    x = _as_tensor(x)
    out = Tensor(x.data.sum())
    return _record(out, [(x, lambda g: np.full_like(x.data, g))])


def masked_mean(x, mask):
    """Mean of elements where mask is true; exactly 0 for an empty mask.

    The empty mask is a documented no-op (zero value, zero gradient), not
    an error: it is the "no face in the clip" case.
    """
    x = _as_tensor(x)
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        raise ContractError("masked_mean requires a boolean mask")
    if m.shape != x.shape:
        raise ShapeError(f"mask shape {m.shape} != tensor shape {x.shape}")
    count = int(m.sum())
    if count == 0:
        out = Tensor(np.zeros((), dtype=x.data.dtype))
        return _record(out, [(x, lambda g: np.zeros_like(x.data))])
    out = Tensor(x.data[m].mean())

    def pull(g):
        grad = np.zeros_like(x.data)
        grad[m] = g / count
        return grad

    return _record(out, [(x, pull)])


# ---------------------------------------------------------------------------
# softmax / normalization
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    """Max-subtracted softmax along `axis`; slices sum to 1 within 1e-12."""
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def pull(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return s * (g - inner)

    return _record(out, [(x, pull)])


def rms_norm(x, gain, eps=1e-6):
    """x / sqrt(mean(x^2, last axis) + eps) * gain."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if gain.data.shape != (x.data.shape[-1],):
        raise ShapeError(
            f"gain shape {gain.shape} must match last axis of {x.shape}"
        )
    d = x.data.shape[-1]
    m = (x.data * x.data).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(m + eps)
    out = Tensor(x.data * r * gain.data)

    def pull_x(g):
        gg = g * gain.data
        inner = (gg * x.data).sum(axis=-1, keepdims=True)
        return r * gg - (r ** 3 / d) * x.data * inner

    def pull_gain(g):
        full = g * x.data * r
        return full.reshape(-1, d).sum(axis=0)

    return _record(out, [(x, pull_x), (gain, pull_gain)])


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product; leading batch extents must broadcast."""
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out_data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from exc
    out = Tensor(out_data)

    def pull_a(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        return _reduce_to(ga, a.data.shape)

    def pull_b(g):
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _reduce_to(gb, b.data.shape)

    return _record(out, [(a, pull_a), (b, pull_b)])


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return _record(out, [(x, lambda g: g.reshape(x.data.shape))])


def transpose(x, axes):
    x = _as_tensor(x)
    inv = np.argsort(axes)
    out = Tensor(x.data.transpose(axes))
    return _record(out, [(x, lambda g: g.transpose(inv))])


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    offsets = np.cumsum([0] + [p.data.shape[axis] for p in parts])
    pulls = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        pulls.append((p, pull))
    return _record(out, pulls)


def split(x, sizes, axis=0):
    """Split along `axis` into consecutive chunks of the given sizes."""
    x = _as_tensor(x)
    if sum(sizes) != x.data.shape[axis]:
        raise ShapeError(f"split sizes {sizes} != extent {x.data.shape[axis]}")
    outs = []
    lo = 0
    for size in sizes:
        hi = lo + size
        idx = [slice(None)] * x.data.ndim
        idx[axis] = slice(lo, hi)
        part = Tensor(x.data[tuple(idx)])

        def pull(g, lo=lo, hi=hi):
            grad = np.zeros_like(x.data)
            idx = [slice(None)] * grad.ndim
            idx[axis] = slice(lo, hi)
            grad[tuple(idx)] = g
            return grad

        _record(part, [(x, pull)])
        outs.append(part)
        lo = hi
    return outs


def embedding(table, ids):
    """Row gather from a [vocab, dim] table; gradient scatters additively."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"ids must be rank 1, got shape {ids.shape}")
    out = Tensor(table.data[ids])

    def pull(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return grad

    return _record(out, [(table, pull)])


def rotate_pairs(x, cos, sin):
    """Rotate (first-half, second-half) feature pairs of the last axis.

    cos/sin are constant arrays broadcastable to each half; the pullback is
    the inverse rotation applied to the gradient.
    """
    x = _as_tensor(x)
    d = x.data.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"last axis must be even for rotation, got {d}")
    h = d // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out = Tensor(np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1))

    def pull(g):
        g1, g2 = g[..., :h], g[..., h:]
        return np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1)

    return _record(out, [(x, pull)])


def backward(loss):
    """Gradient map of a scalar loss on the active tape (see Tape.backward)."""
    tape = active_tape()
    if tape is None:
        raise ContractError("backward requires an active tape")
    return tape.backward(loss)
