"""Dense-tensor math with tape-based reverse-mode automatic differentiation.

Tensors wrap row-major contiguous numpy arrays (float32 for training,
float64 for gradient checking). Operations executed while a Tape is
active record backward closures onto it; ``Tape.backward`` replays them
in reverse insertion order, which is a valid reverse topological order
because every operand is created before its consumer.

Every documented operation checks its output for NaN/Inf and raises
``NumericError`` instead of propagating silently. Bit-exactness claims
refer to the fixed reduction order of the default single-build numpy
backend.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, OracleError, ShapeError

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_STATE = threading.local()


def _stack():
    if not hasattr(_STATE, "tapes"):
        _STATE.tapes = []
    return _STATE.tapes


def active_tape():
    """The innermost active Tape of this thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_tape():
    """Temporarily suspend recording (used by oracles and evaluation)."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """N-dimensional float array, optionally participating in a tape.

    ``data`` is always C-contiguous; ``grad`` (same shape) is populated
    by ``Tape.backward`` for tensors that require gradients. Tensors are
    treated as immutable once recorded on a tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """A constant copy: no grad requirement, no tape membership."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all routing through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("tensor division is only defined by scalars")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named tensor with a trainable/frozen flag.

    ``trainable`` aliases the tensor's requires_grad so the tape can
    never write a gradient into a frozen parameter.
    """

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, tensor: Tensor, trainable: bool = True):
        self.name = name
        self.tensor = tensor
        tensor.requires_grad = bool(trainable)

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.tensor.requires_grad = bool(flag)

    def __repr__(self):
        state = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={tuple(self.tensor.shape)}, {state})"


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out, backward):
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of operations; context manager activates it."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        if popped is not self:
            raise ContractError("tape context exited out of order")
        return False

    def backward(self, root: Tensor):
        """Populate grads of everything the scalar ``root`` depends on."""
        if root.data.size != 1:
            raise ContractError(
                f"backward root must be scalar, got shape {tuple(root.shape)}"
            )
        if root.tape_id is None or root.tape_id >= len(self.nodes) or self.nodes[root.tape_id].out is not root:
            raise ContractError("backward root was not recorded on this tape")
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node.out.grad is not None:
                node.backward(node.out.grad)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data, op, inputs, backward):
    _check_finite(data, op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = len(tape.nodes)
        tape.nodes.append(_Node(out, backward))
    return out


def _as_tensor(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _match_dtypes(a: Tensor, b: Tensor, op):
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: mixed dtypes {a.dtype.name} and {b.dtype.name}")


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _match_dtypes(a, b, "add")
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(data, "add", (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _match_dtypes(a, b, "sub")
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _result(data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _match_dtypes(a, b, "mul")
    try:
        with np.errstate(over="ignore"):
            data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data

    def backward(g):
        _accum(a, _unbroadcast(g * bd, a.shape))
        _accum(b, _unbroadcast(g * ad, b.shape))

    return _result(data, "mul", (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accum(a, g * s)

    return _result(a.data * s, "scale", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-D x 2-D, stacked x 2-D (shared weight)
    and batched with identical leading dimensions."""
    _match_dtypes(a, b, "matmul")
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")
    if bd.ndim != 2 and (ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]):
        raise ShapeError(f"matmul: leading dimensions differ for {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        data = ad @ bd

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ bd.swapaxes(-1, -2))
        if b.requires_grad:
            if bd.ndim == 2:
                axes = list(range(ad.ndim - 1))
                _accum(b, np.tensordot(ad, g, axes=(axes, axes)))
            else:
                _accum(b, ad.swapaxes(-1, -2) @ g)

    return _result(data, "matmul", (a, b), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.ascontiguousarray(np.transpose(g, inverse)))

    return _result(np.ascontiguousarray(np.transpose(a.data, axes)), "transpose", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}")

    def backward(g):
        _accum(a, g.reshape(old))

    return _result(np.ascontiguousarray(data), "reshape", (a,), backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the row axis (second-to-last)."""
    _match_dtypes(a, b, "concat_rows")
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat_rows: ranks differ for {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_rows: shapes {a.shape} and {b.shape} do not align")
    n_a = a.shape[-2]

    def backward(g):
        ga, gb = np.split(g, [n_a], axis=-2)
        _accum(a, ga)
        _accum(b, gb)

    return _result(np.concatenate([a.data, b.data], axis=-2), "concat_rows", (a, b), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} does not broadcast to {shape}")

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))

    return _result(np.ascontiguousarray(data), "broadcast_to", (a,), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along the first axis; duplicate indices allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows: indices must be 1-D")
    if a.data.ndim < 1:
        raise ShapeError("take_rows: operand must have a leading axis")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for leading dim {a.shape[0]}")

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _result(a.data[idx].copy(), "take_rows", (a,), backward)


def select_row(a: Tensor, row: int) -> Tensor:
    """Index one row along the second-to-last axis (e.g. the class token)."""
    if a.data.ndim < 2:
        raise ShapeError("select_row needs a >=2-D operand")
    if not 0 <= row < a.shape[-2]:
        raise ShapeError(f"select_row: row {row} out of range for shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[..., row, :] = g
            _accum(a, buf)

    return _result(a.data[..., row, :].copy(), "select_row", (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by row-max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, "softmax_rows", (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply learnable gain and bias."""
    _match_dtypes(x, gain, "layer_norm")
    _match_dtypes(x, bias, "layer_norm")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gd
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term * inv_std)

    return _result(data, "layer_norm", (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    data = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        _accum(x, g * (cdf + xd * pdf))

    return _result(data, "gelu", (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _result(y, "sigmoid", (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    return _result(np.maximum(x.data, 0.0), "relu", (x,), backward)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    xd = x.data

    def backward(g):
        _accum(x, g / xd)

    return _result(data, "log", (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    """Square root; the gradient at exactly zero is defined as zero."""
    with np.errstate(invalid="ignore"):
        data = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            nz = x.data > 0
            gx[nz] = g[nz] * 0.5 / data[nz]
            _accum(x, gx)

    return _result(data, "sqrt", (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through inside the closed range."""
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _accum(x, g * mask)

    return _result(np.clip(x.data, lo, hi), "clamp", (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), "mean_all", (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), "sum_all", (x,), backward)


def sum_last(x: Tensor) -> Tensor:
    """Sum over the last axis."""

    def backward(g):
        _accum(x, np.broadcast_to(g[..., None], x.data.shape))

    return _result(x.data.sum(axis=-1), "sum_last", (x,), backward)


def finite_diff_grad(f, x: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient estimate of a scalar function of x.

    Evaluations run with the tape suspended so the oracle stays
    independent of the reverse-mode path it is checking.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad: step h must be positive")
    base = x.data

    def evaluate(values):
        with no_tape():
            r = f(Tensor(values.reshape(base.shape), dtype=base.dtype))
        v = r.item() if isinstance(r, Tensor) else float(r)
        if not math.isfinite(v):
            raise OracleError("finite_diff_grad: non-finite function evaluation")
        return v

    flat = base.ravel()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        down = flat.copy()
        down[i] -= h
        out[i] = (evaluate(up) - evaluate(down)) / (2.0 * h)
    return Tensor(out.reshape(base.shape))


def gradient_relative_error(analytic, numeric) -> float:
    """Sup-norm relative disagreement between two gradient estimates."""
    a = analytic.data if isinstance(analytic, Tensor) else np.asarray(analytic)
    n = numeric.data if isinstance(numeric, Tensor) else np.asarray(numeric)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    diff = float(np.max(np.abs(a - n))) if a.size else 0.0
    denom = max(float(np.max(np.abs(a))) if a.size else 0.0,
                float(np.max(np.abs(n))) if n.size else 0.0)
    if denom < 1e-12:
        return 0.0 if diff < 1e-12 else diff / 1e-12
    return diff / denom
