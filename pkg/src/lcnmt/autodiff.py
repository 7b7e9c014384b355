"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a C-contiguous float32/float64 NumPy array.
Primitives compute forward values immediately and, while a :class:`Tape`
is active, append their backward rule to it. ``Tape.backward`` walks the
recorded operations in reverse execution order (which is a topological
order by construction) and accumulates gradients additively into every
reachable leaf.

Two float profiles are supported per tensor: float64 for gradient
verification, float32 for training speed. Broadcasting is restricted to
leading batch dimensions: two shapes are compatible when one is a suffix
of the other. Anything else requires an explicit reshape by the caller.
"""

from __future__ import annotations

import numpy as np

from . import kernels

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Finite stand-in for -inf in masked attention logits: exp(x - max) for a
# masked entry underflows to exactly 0.0 while every value stays finite.
MASK_FILL = -1e9


class ShapeError(ValueError):
    """Raised when operand shapes are invalid for a primitive."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf is detected where finiteness is required."""


class RecordError(RuntimeError):
    """Raised on misuse of a computation record (tape)."""


_TAPE_STACK: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        # np.ascontiguousarray would promote 0-d scalars to 1-d; keep rank.
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def check_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{what} contains NaN/Inf" + (f" (name={self.name})" if self.name else ""))
        return self

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # Operator sugar used by model/loss code; all route through primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed primitives; one backward pass each.

    Entries are (output, inputs, backward_fn); backward_fn maps the output
    gradient to per-input gradient contributions (None where no gradient
    flows). The record is consumed by :meth:`backward`.
    """

    def __init__(self):
        self._entries = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) for every reachable leaf.

        Returns a map {leaf Tensor: gradient ndarray}; the same gradients
        are added into each leaf's ``.grad`` (zero-initialized on first
        use, additive across backward calls until explicitly zeroed).
        """
        if self._consumed:
            raise RecordError("computation record already consumed")
        if not isinstance(loss, Tensor) or loss.data.ndim != 0:
            got = getattr(loss, "shape", type(loss).__name__)
            raise RecordError(f"backward requires a scalar loss, got {got}")
        if not self._entries:
            raise RecordError("computation record is empty")

        grads = {id(loss): np.ones((), dtype=loss.dtype)}
        leaf_grads = {}
        for out, ins, backward_fn in reversed(self._entries):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for t, g in zip(ins, backward_fn(g_out)):
                if g is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    if t in leaf_grads:
                        leaf_grads[t] += g
                    else:
                        leaf_grads[t] = np.array(g, dtype=t.dtype, copy=True)
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] += g
                    else:
                        grads[key] = np.array(g, dtype=t.dtype, copy=True)
        for t, g in leaf_grads.items():
            t.accumulate_grad(g)
        self._entries.clear()
        self._consumed = True
        return leaf_grads


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out, ins, backward_fn):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in ins):
        out.requires_grad = True
        out.is_leaf = False
        tape._entries.append((out, ins, backward_fn))
    return out


def _tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# broadcast helpers (leading-dimension broadcast only)

def _suffix_compatible(a_shape, b_shape):
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    return small == big[len(big) - len(small):]


def _check_broadcast(op, a, b):
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not leading-broadcast compatible")


def _reduce_to(g, shape):
    """Sum gradient g over the leading axes broadcast added."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# primitives

def add(a, b):
    a, b = _tensor(a), _tensor(b, like=a)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(out, (a, b), backward_fn)


def sub(a, b):
    a, b = _tensor(a), _tensor(b, like=a)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record(out, (a, b), backward_fn)


def mul(a, b):
    a, b = _tensor(a), _tensor(b, like=a)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _record(out, (a, b), backward_fn)


def scale(a, s):
    a = _tensor(a)
    s = float(s)
    out = Tensor(a.data * s)

    def backward_fn(g):
        return (g * s,)

    return _record(out, (a,), backward_fn)


def matmul(a, b):
    """a @ b with b either 2-D (shared weights) or same leading dims as a."""
    a, b = _tensor(a), _tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} vs {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions disagree: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward_fn(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        if b.ndim == 2:
            k = a.shape[-1]
            n = b.shape[-1]
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return ga, gb

    return _record(out, (a, b), backward_fn)


def transpose_last_two(a):
    a = _tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last_two: needs >= 2 dims, got {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.swapaxes(-1, -2)))

    def backward_fn(g):
        return (g.swapaxes(-1, -2),)

    return _record(out, (a,), backward_fn)


def concat_last(tensors):
    tensors = [_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_last: empty input list")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last: leading shapes disagree: {tensors[0].shape} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1))
    sizes = [t.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _record(out, tuple(tensors), backward_fn)


def slice_last(a, start, stop):
    a = _tensor(a)
    k = a.shape[-1]
    if not (0 <= start < stop <= k):
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for last dim {k}")
    out = Tensor(np.ascontiguousarray(a.data[..., start:stop]))

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[..., start:stop] = g
        return (ga,)

    return _record(out, (a,), backward_fn)


def split_last(a, parts):
    """Split the last dimension into `parts` equal slices."""
    a = _tensor(a)
    k = a.shape[-1]
    if parts < 1 or k % parts != 0:
        raise ShapeError(f"split_last: cannot split last dim {k} into {parts} parts")
    w = k // parts
    return [slice_last(a, i * w, (i + 1) * w) for i in range(parts)]


def softmax(a):
    a = _tensor(a)
    out = Tensor(kernels.softmax_fwd(a.data))
    y = out.data

    def backward_fn(g):
        return (kernels.softmax_bwd(y, g),)

    return _record(out, (a,), backward_fn)


def log_softmax(a):
    a = _tensor(a)
    out = Tensor(kernels.log_softmax_fwd(a.data))
    logp = out.data

    def backward_fn(g):
        return (kernels.log_softmax_bwd(logp, g),)

    return _record(out, (a,), backward_fn)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    a = _tensor(a)
    xhat, rstd = kernels.layer_norm_fwd(a.data, eps)
    out = Tensor(xhat)

    def backward_fn(g):
        return (kernels.layer_norm_bwd(xhat, rstd, g),)

    return _record(out, (a,), backward_fn)


def relu(a):
    """max(0, x); subgradient at the kink is 0."""
    a = _tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    pos = a.data > 0

    def backward_fn(g):
        return (g * pos,)

    return _record(out, (a,), backward_fn)


# The margin-ranking hinge [.]_+ is the same primitive.
hinge_pos = relu


def dropout(a, p, rng=None, train=False):
    """Inverted dropout: scales kept activations by 1/(1-p) at train time.

    In eval mode (train=False) this is a pure identity and returns the
    input tensor itself.
    """
    a = _tensor(a)
    if not train or p == 0.0:
        return a
    if not (0.0 <= p < 1.0):
        raise ValueError(f"dropout: rate must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout: train mode requires an rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype)
    keep /= (1.0 - p)
    out = Tensor(a.data * keep)

    def backward_fn(g):
        return (g * keep,)

    return _record(out, (a,), backward_fn)


def embedding(table, ids):
    """Row lookup; the gradient scatter-adds rows (repeated ids accumulate)."""
    table = _tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")
    out = Tensor(table.data[ids])

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        kernels.scatter_add_rows(gt, ids, g)
        return (gt,)

    return _record(out, (table,), backward_fn)


def masked_fill(a, mask, value):
    """Replace entries where mask is True by `value` (a finite float)."""
    a = _tensor(a)
    value = float(value)
    if not np.isfinite(value):
        raise NonFiniteError("masked_fill: fill value must be finite")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = Tensor(np.where(mask, a.dtype.type(value), a.data))
    keep = ~mask

    def backward_fn(g):
        return (g * keep,)

    return _record(out, (a,), backward_fn)


def sum_all(a):
    a = _tensor(a)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))

    def backward_fn(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return _record(out, (a,), backward_fn)


def mean_all(a):
    return scale(sum_all(a), 1.0 / _tensor(a).size)


def sum_last(a):
    a = _tensor(a)
    out = Tensor(a.data.sum(axis=-1))

    def backward_fn(g):
        return (np.broadcast_to(g[..., None], a.shape).copy(),)

    return _record(out, (a,), backward_fn)


def gather_last(a, idx):
    """out[...] = a[..., idx[...]] for an integer index array over leading dims."""
    a = _tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} != leading shape {a.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError(f"gather_last: index out of range for last dim {a.shape[-1]}")
    out = Tensor(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        rows = ga.reshape(-1, ga.shape[-1])
        np.add.at(rows, (np.arange(rows.shape[0]), idx.reshape(-1)), g.reshape(-1))
        return (ga,)

    return _record(out, (a,), backward_fn)


def log(a):
    a = _tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    out = Tensor(np.log(a.data))

    def backward_fn(g):
        return (g / a.data,)

    return _record(out, (a,), backward_fn)


def exp(a):
    a = _tensor(a)
    out = Tensor(np.exp(a.data))
    y = out.data

    def backward_fn(g):
        return (g * y,)

    return _record(out, (a,), backward_fn)


def sigmoid(a):
    a = _tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _record(out, (a,), backward_fn)


def cast(a, dtype):
    a = _tensor(a)
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise ValueError(f"cast: unsupported dtype {dtype}")
    if a.dtype == dtype:
        return a
    out = Tensor(a.data.astype(dtype))

    def backward_fn(g):
        return (g.astype(a.dtype),)

    return _record(out, (a,), backward_fn)


def detach(a):
    """Value copy with no gradient link (stop-gradient)."""
    a = _tensor(a)
    return Tensor(a.data.copy())
