"""Dense tensors with tape-based reverse-mode automatic differentiation.

The op set is deliberately small: exactly what the encoder blocks, the
binarizers and the pretraining loop need. Everything is float64 numpy
underneath, which keeps finite-difference checks meaningful.

Recording model: ops executed inside a ``with Tape() as tape:`` block are
appended to that tape whenever at least one input requires gradients.
``tape.backward(loss)`` then walks the records once, in reverse, and
accumulates ``.grad`` arrays on every tensor that requested them. Outside
a tape, ops are plain forward computations.

Broadcasting is restricted to the one-sided case (scalar against tensor,
or a bias-like operand whose shape broadcasts onto the other operand's
shape). Anything richer must be made explicit with reshape/transpose.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, EmptyInputError, NumericError

DTYPE = np.float64

# Test hook: map op name -> multiplicative factor applied to the gradients
# that op produces during backward. Used by the gradcheck CLI as a negative
# control; empty in normal operation.
GRADIENT_CORRUPTION: dict[str, float] = {}


class Tensor:
    """A dense n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Python scalars are wrapped as constant tensors.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DTYPE))


def as_tensor(value, requires_grad: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)


class OpRecord:
    """One executed operation: inputs, output and the gradient closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "visits")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.visits = 0


_ACTIVE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops; replayed once, in reverse, by backward.

    A tape and the tensors recorded on it belong to a single thread.
    Independent tapes may run concurrently in different threads.
    """

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients of ``output`` into every recorded tensor.

        ``output`` must be scalar unless an explicit ``seed`` gradient of
        matching shape is given. Each record is visited exactly once.
        """
        if seed is None:
            if output.size != 1:
                raise DimensionError(
                    f"backward needs a scalar output or an explicit seed, got shape {output.shape}")
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=DTYPE)
            if seed.shape != output.data.shape:
                raise DimensionError(
                    f"seed shape {seed.shape} does not match output shape {output.data.shape}")
        output.grad = seed if output.grad is None else output.grad + seed
        for rec in reversed(self.records):
            rec.visits += 1
            upstream = rec.output.grad
            if upstream is None:
                continue
            grads = rec.backward_fn(upstream)
            factor = GRADIENT_CORRUPTION.get(rec.op)
            for tensor, grad in zip(rec.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if factor is not None:
                    grad = grad * factor
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad

    def visit_counts(self) -> list[int]:
        return [rec.visits for rec in self.records]


def apply_op(op: str, inputs: Iterable[Tensor], out_data: np.ndarray,
             backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Create the output tensor for a primitive op and record it if needed.

    Public so that modules defining ops with bespoke gradients (the
    binarizers) can participate in the same tape.
    """
    inputs = tuple(inputs)
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape.records.append(OpRecord(op, inputs, out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_one_sided_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    """Allow equal shapes, scalars and bias-style one-sided broadcasts."""
    if a.shape == b.shape:
        return a.shape
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None
    if out_shape != a.shape and out_shape != b.shape:
        raise DimensionError(
            f"{op}: mutual broadcasting of {a.shape} and {b.shape} is not supported; "
            "reshape one operand explicitly")
    return out_shape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of a one-sided broadcast)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_one_sided_broadcast("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", (a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_one_sided_broadcast("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op("sub", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_one_sided_broadcast("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply_op("mul", (a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-d operands or stacked operands with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: need equal-rank operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = a.data @ b.data

    def backward(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return apply_op("matmul", (a, b), out, backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return apply_op("transpose", (a,), out, backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    original = a.shape

    def backward(g):
        return (g.reshape(original),)

    return apply_op("reshape", (a,), out, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {axis} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return apply_op("narrow", (a,), out, backward)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows (or slices along ``axis``) by integer index, with repeats."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"gather: indices must be 1-d, got shape {idx.shape}")
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return apply_op("gather", (a,), out, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise EmptyInputError("concat: need at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return apply_op("concat", tensors, out, backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def backward(g):
        return (g * mask,)

    return apply_op("relu", (a,), out, backward)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", (a,), out, backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to stay overflow-free.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def backward(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return apply_op("swish", (a,), out, backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        return (g * d,)

    return apply_op("gelu", (a,), out, backward)


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: split ``axis`` in halves, first half times sigmoid of second."""
    size = a.shape[axis]
    if size % 2 != 0:
        raise DimensionError(f"glu: axis {axis} has odd size {size}, cannot split in halves")
    half = size // 2
    index_a = [slice(None)] * a.ndim
    index_b = [slice(None)] * a.ndim
    index_a[axis] = slice(0, half)
    index_b[axis] = slice(half, size)
    index_a, index_b = tuple(index_a), tuple(index_b)
    first = a.data[index_a]
    gate = _sigmoid(a.data[index_b])
    out = first * gate

    def backward(g):
        full = np.zeros_like(a.data)
        full[index_a] = g * gate
        full[index_b] = g * first * gate * (1.0 - gate)
        return (full,)

    return apply_op("glu", (a,), out, backward)


# ---------------------------------------------------------------------------
# normalizers and reductions
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax: input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", (a,), out, backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis; learnable per-feature gain and bias.

    A constant (zero-variance) input normalizes to zero, so the output is
    just the bias.
    """
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data * xhat + bias.data

    def backward(g):
        dims = tuple(range(a.ndim - 1))
        dgain = (g * xhat).sum(axis=dims)
        dbias = g.sum(axis=dims)
        dxhat = g * gain.data
        da = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return da, dgain, dbias

    return apply_op("layer_norm", (a, gain, bias), out, backward)


def batch_norm_inference(a: Tensor, gain: Tensor, bias: Tensor,
                         running_mean: np.ndarray, running_var: np.ndarray,
                         eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a (channels, time) tensor with fixed stats."""
    c = a.shape[0]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"batch_norm_inference: gain/bias must have shape ({c},), got {gain.shape} and {bias.shape}")
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (a.data - running_mean[:, None]) * inv[:, None]
    out = gain.data[:, None] * xhat + bias.data[:, None]

    def backward(g):
        da = g * (gain.data * inv)[:, None]
        dgain = (g * xhat).sum(axis=1)
        dbias = g.sum(axis=1)
        return da, dgain, dbias

    return apply_op("batch_norm_inference", (a, gain, bias), out, backward)


def mask_fill(a: Tensor, keep, fill_value: float) -> Tensor:
    """Replace entries where ``keep`` is False with ``fill_value``.

    Gradients flow only through the kept entries.
    """
    keep_arr = np.broadcast_to(np.asarray(keep, dtype=bool), a.shape)
    out = np.where(keep_arr, a.data, fill_value)

    def backward(g):
        return (g * keep_arr,)

    return apply_op("mask_fill", (a,), out, backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        out = np.asarray(a.data.mean())
        count = a.size

        def backward(g):
            return (np.full_like(a.data, float(g) / count),)
    else:
        out = a.data.mean(axis=axis)
        count = a.shape[axis]

        def backward(g):
            return (np.repeat(np.expand_dims(g / count, axis), count, axis=axis),)

    return apply_op("mean", (a,), out, backward)


def avg_pool_time(a: Tensor, factor: int) -> Tensor:
    """Average-pool a (time, features) tensor along time.

    Output length is ceil(n / factor); a ragged final window averages the
    rows that remain.
    """
    n = a.shape[0]
    if n < factor:
        raise DimensionError(f"avg_pool_time: length {n} shorter than factor {factor}")
    m = -(-n // factor)
    bounds = [(t * factor, min((t + 1) * factor, n)) for t in range(m)]
    out = np.stack([a.data[lo:hi].mean(axis=0) for lo, hi in bounds])

    def backward(g):
        da = np.zeros_like(a.data)
        for t, (lo, hi) in enumerate(bounds):
            da[lo:hi] += g[t] / (hi - lo)
        return (da,)

    return apply_op("avg_pool_time", (a,), out, backward)


def upsample_nearest_time(a: Tensor, n: int, factor: int) -> Tensor:
    """Nearest-neighbor upsample of a (time, features) tensor back to length ``n``."""
    idx = np.minimum(np.arange(n) // factor, a.shape[0] - 1)
    return gather(a, idx, axis=0)


def cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean negative log-likelihood over selected rows of (n, classes) logits.

    ``mask`` is an optional boolean row selector; rows outside it contribute
    nothing to the loss or the gradient.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}")
    if mask is None:
        rows = np.arange(logits.shape[0])
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (logits.shape[0],):
            raise DimensionError(
                f"cross_entropy: mask shape {mask.shape} does not match {logits.shape[0]} rows")
        rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise EmptyInputError("cross_entropy: no rows selected")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    out = np.asarray(-logp[rows, labels[rows]].mean())

    def backward(g):
        grad = np.zeros_like(z)
        probs = np.exp(logp[rows])
        probs[np.arange(rows.size), labels[rows]] -= 1.0
        grad[rows] = probs / rows.size
        return (float(g) * grad,)

    return apply_op("cross_entropy", (logits,), out, backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

CONV_MODES = ("full", "pointwise", "depthwise")


def conv1d(x: Tensor, w: Tensor, mode: str = "full", stride: int = 1) -> Tensor:
    """Cross-correlation along time with zero same-padding.

    ``x`` is (c_in, n); ``w`` is (c_out, c_in, k), with depthwise weights
    shaped (c, 1, k). Stride 2 halves the time axis (ceil).
    """
    if mode not in CONV_MODES:
        raise DimensionError(f"conv1d: unknown mode {mode!r}")
    if stride not in (1, 2):
        raise DimensionError(f"conv1d: stride must be 1 or 2, got {stride}")
    if x.ndim != 2 or w.ndim != 3:
        raise DimensionError(f"conv1d: need x (c_in, n) and w (c_out, c_in, k), got {x.shape}, {w.shape}")
    c_in, n = x.shape
    c_out, w_cin, k = w.shape
    if mode == "pointwise" and k != 1:
        raise DimensionError(f"conv1d: pointwise mode requires k == 1, got k={k}")
    if mode == "depthwise":
        if c_out != c_in or w_cin != 1:
            raise DimensionError(
                f"conv1d: depthwise needs weights ({c_in}, 1, k), got {w.shape}")
    elif w_cin != c_in:
        raise DimensionError(f"conv1d: weight channels {w_cin} != input channels {c_in}")

    pad_left = (k - 1) // 2
    pad_right = k - 1 - pad_left
    padded_len = n + pad_left + pad_right
    if padded_len < k:
        raise DimensionError(f"conv1d: kernel {k} wider than padded input of length {padded_len}")
    n_out = -(-n // stride)

    xp = np.pad(x.data, ((0, 0), (pad_left, pad_right)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride, :]
    windows = windows[:, :n_out, :]  # (c_in, n_out, k)

    if mode == "depthwise":
        out = np.einsum("ctj,cj->ct", windows, w.data[:, 0, :])
    else:
        out = np.einsum("ctj,ocj->ot", windows, w.data)

    def backward(g):
        if mode == "depthwise":
            dw = np.einsum("ct,ctj->cj", g, windows)[:, None, :]
            dwin = g[:, :, None] * w.data[:, 0, :][:, None, :]
        else:
            dw = np.einsum("ot,ctj->ocj", g, windows)
            dwin = np.einsum("ot,ocj->ctj", g, w.data)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, j:j + n_out * stride:stride] += dwin[:, :, j]
        dx = dxp[:, pad_left:pad_left + n]
        return dx, dw

    return apply_op("conv1d", (x, w), out, backward)
