"""Reverse-mode automatic differentiation over float64 numpy arrays.

The design is a classic gradient tape: ``Tape.watch`` marks leaf tensors,
every operation on tracked tensors appends one record (output node, input
nodes, backward rule) to the tape, and ``Tape.gradients`` replays the
records in reverse creation order. Creation order is a valid topological
order because an operation can only consume tensors that already exist,
so each node's backward rule runs exactly once.

Tensors are immutable carriers of float64 data. Every operation checks
its result for NaN/Inf and raises ``NonFiniteError`` instead of letting
poison propagate; masking therefore uses large finite negatives (see
``NEG_MASK``) rather than -inf.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

# Additive attention-mask value: large enough that masked softmax weights
# underflow to exact zero in float64, finite so the NaN/Inf guard holds.
NEG_MASK = -1e9


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A value or an operation's result contains NaN or Inf."""


class TapeError(RuntimeError):
    """Tensors from different tapes were mixed, or a tape was misused."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Immutable float64 array, optionally tracked on a gradient tape.

    A tensor with ``tape is None`` is a plain value; operations on it run
    as untracked numpy computations. Tensors become tracked either by
    ``Tape.watch`` (leaves, i.e. parameters) or by being produced by an
    operation with at least one tracked input.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, values, tape: "Tape | None" = None, node: int | None = None):
        data = np.asarray(values, dtype=np.float64)
        _check_finite(data, "tensor creation")
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tracked = "tracked" if self.node is not None else "plain"
        return f"Tensor(shape={self.shape}, {tracked})"

    # Arithmetic delegates to the module-level ops so tracking rules live
    # in one place.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: int, inputs: tuple[int | None, ...], backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records operations on watched tensors and replays them backward.

    Usable as a context manager; on exit all watched tensors are released
    (their tape/node references cleared) so later forward passes run
    untracked. Failing to release would make subsequent inference record
    onto a dead tape, so prefer the ``with`` form.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._next_node = 0
        self._watched: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    def _new_node(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    def watch(self, tensor: Tensor) -> Tensor:
        """Mark a leaf tensor as a differentiation target."""
        if tensor.tape is self:
            return tensor
        if tensor.tape is not None:
            raise TapeError("tensor is already tracked on a different tape")
        tensor.tape = self
        tensor.node = self._new_node()
        self._watched[tensor.node] = tensor
        return tensor

    def release(self) -> None:
        """Detach all watched tensors so they behave as plain values again."""
        for tensor in self._watched.values():
            tensor.tape = None
            tensor.node = None
        self._watched.clear()
        self._records.clear()

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        node = self._new_node()
        in_nodes = tuple(t.node if t.tape is self else None for t in inputs)
        self._records.append(_Record(node, in_nodes, backward))
        return Tensor(data, self, node)

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of a scalar loss w.r.t. every watched leaf.

        Returns a map from leaf node id to a gradient array of the leaf's
        shape. Leaves the loss does not depend on get exact zeros. Raises
        on a non-scalar loss or a loss from another tape.
        """
        if loss.tape is not self:
            raise TapeError("loss tensor is not tracked on this tape")
        if loss.size != 1:
            raise ShapeError(f"gradients need a scalar loss, got shape {loss.shape}")
        partial: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g_out = partial.get(rec.out)
            if g_out is None:
                continue
            for in_node, g in zip(rec.inputs, rec.backward(g_out)):
                if in_node is None or g is None:
                    continue
                _check_finite(g, "backward rule")
                acc = partial.get(in_node)
                partial[in_node] = g if acc is None else acc + g
        return {
            node: partial.get(node, np.zeros_like(leaf.data))
            for node, leaf in self._watched.items()
        }


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError("operation mixes tensors from different tapes")
    return tape


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, backward)


def _broadcast_kind(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> str:
    """Classify an elementwise pairing: equal shapes, scalar, or suffix.

    Suffix broadcast means b's shape equals the trailing axes of a's, which
    covers bias-over-rows and mask-over-heads without the full numpy
    broadcast zoo (whose backward is easy to get silently wrong).
    """
    if a_shape == b_shape:
        return "equal"
    if b_shape == ():
        return "scalar"
    if len(b_shape) < len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return "suffix"
    raise ShapeError(f"shapes {a_shape} and {b_shape} are not elementwise-compatible")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    kind = _broadcast_kind(a.shape, b.shape)
    if kind == "scalar" and a.shape == ():
        pass  # scalar+scalar is fine either way
    data = a.data + b.data
    b_shape = b.shape

    def backward(g):
        return g, _reduce_to(g, b_shape)

    return _emit(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_kind(a.shape, b.shape)
    data = a.data - b.data
    b_shape = b.shape

    def backward(g):
        return g, -_reduce_to(g, b_shape)

    return _emit(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_kind(a.shape, b.shape)
    data = a.data * b.data
    a_data, b_data, b_shape = a.data, b.data, b.shape

    def backward(g):
        return g * b_data, _reduce_to(g * a_data, b_shape)

    return _emit(data, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        return (-g,)

    return _emit(-a.data, (a,), backward, "neg")


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands or batched 3-D operands.

    3-D operands need equal batch sizes; a single 2-D right operand is
    applied to every batch of a 3-D left operand (and vice versa).
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul supports 2-D/3-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch sizes disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    a_data, b_data = a.data, b.data
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        ga = _reduce_to(g @ np.swapaxes(b_data, -1, -2), a_shape)
        gb = _reduce_to(np.swapaxes(a_data, -1, -2) @ g, b_shape)
        return ga, gb

    return _emit(data, (a, b), backward, "matmul")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)
    a_shape = a.shape

    def backward(g):
        return (g.reshape(a_shape),)

    return _emit(data, (a,), backward, "reshape")


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _wrap(a)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation for ndim {a.ndim}")
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _emit(data, (a,), backward, "transpose")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` elements along ``axis``."""
    a = _wrap(a)
    axis = axis % a.ndim
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}"
        )
    index = (slice(None),) * axis + (slice(start, start + length),)
    data = a.data[index]
    a_shape = a.shape

    def backward(g):
        full = np.zeros(a_shape)
        full[index] = g
        return (full,)

    return _emit(data, (a,), backward, "narrow")


def take_rows(table, indices) -> Tensor:
    """Gather rows of a 2-D table by integer index array of any shape."""
    table = _wrap(table)
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D table, got {table.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take_rows indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take_rows index out of range for table with {table.shape[0]} rows")
    data = table.data[idx]
    t_shape = table.shape

    def backward(g):
        full = np.zeros(t_shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(data, (table,), backward, "take_rows")


def concat_rows(parts: Sequence) -> Tensor:
    """Stack 2-D tensors with equal column counts along axis 0."""
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    cols = {p.shape[-1] for p in parts}
    if any(p.ndim != 2 for p in parts) or len(cols) != 1:
        raise ShapeError(f"concat_rows needs 2-D parts with equal columns, got {[p.shape for p in parts]}")
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def backward(g):
        grads = []
        offset = 0
        for n in sizes:
            grads.append(g[offset:offset + n])
            offset += n
        return tuple(grads)

    return _emit(data, parts, backward, "concat_rows")


def sum_all(a) -> Tensor:
    a = _wrap(a)
    data = np.asarray(a.data.sum())
    a_shape = a.shape

    def backward(g):
        return (np.full(a_shape, float(g)),)

    return _emit(data, (a,), backward, "sum_all")


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    data = np.log(a.data)
    a_data = a.data

    def backward(g):
        return (g / a_data,)

    return _emit(data, (a,), backward, "log")


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    a = _wrap(a)
    data = np.maximum(a.data, floor)
    pass_mask = (a.data > floor).astype(np.float64)

    def backward(g):
        return (g * pass_mask,)

    return _emit(data, (a,), backward, "clamp_min")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Smooth gaussian-error linear unit (tanh form).

    Chosen over relu everywhere so difference-quotient gradient checks
    never straddle a kink.
    """
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner

    def backward(g):
        return (g * local,)

    return _emit(data, (a,), backward, "gelu")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    # exp(-|x|) never overflows, so both branches stay finite.
    decay = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay))
    local = data * (1.0 - data)

    def backward(g):
        return (g * local,)

    return _emit(data, (a,), backward, "sigmoid")


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis; rows sum to one exactly
    up to float64 rounding. An empty axis is a shape error."""
    a = _wrap(a)
    axis = axis % a.ndim if a.ndim else 0
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax needs a non-empty axis, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    data = exp / exp.sum(axis=axis, keepdims=True)
    y = data

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit(data, (a,), backward, "softmax")


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply
    per-feature gain and bias. ``eps`` keeps constant inputs finite."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    d = a.shape[-1] if a.ndim else 0
    if a.ndim == 0 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm needs input (..., d) with gain/bias (d,), got {a.shape}, {gain.shape}, {bias.shape}"
        )
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    data = normed * gain.data + bias.data
    gain_data = gain.data

    def backward(g):
        d_normed = g * gain_data
        d_gain = (g * normed).reshape(-1, d).sum(axis=0)
        d_bias = g.reshape(-1, d).sum(axis=0)
        mean_dn = d_normed.mean(axis=-1, keepdims=True)
        mean_dn_n = (d_normed * normed).mean(axis=-1, keepdims=True)
        da = inv * (d_normed - mean_dn - normed * mean_dn_n)
        return da, d_gain, d_bias

    return _emit(data, (a, gain, bias), backward, "layer_norm")


def conv1d(a, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over time: input (T, C_in), kernel (k, C_in, C_out).

    Output length is floor((T + 2*padding - k) / stride) + 1. The kernel
    must fit inside the padded input.
    """
    a, kernel = _wrap(a), _wrap(kernel)
    if a.ndim != 2 or kernel.ndim != 3:
        raise ShapeError(f"conv1d needs input (T, C_in) and kernel (k, C_in, C_out), got {a.shape}, {kernel.shape}")
    t_in, c_in = a.shape
    k, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {c_in}, kernel {kc_in}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv1d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    t_pad = t_in + 2 * padding
    if k > t_pad:
        raise ShapeError(f"conv1d kernel {k} exceeds padded length {t_pad}")
    t_out = (t_pad - k) // stride + 1
    padded = np.pad(a.data, ((padding, padding), (0, 0)))
    data = np.zeros((t_out, c_out))
    # One strided slice per kernel tap keeps this a handful of matmuls
    # instead of a python loop over output frames.
    for tap in range(k):
        window = padded[tap: tap + stride * (t_out - 1) + 1: stride]
        data += window @ kernel.data[tap]
    kern_data = kernel.data

    def backward(g):
        g_kernel = np.zeros(kern_data.shape)
        g_padded = np.zeros(padded.shape)
        for tap in range(k):
            sl = slice(tap, tap + stride * (t_out - 1) + 1, stride)
            g_kernel[tap] = padded[sl].T @ g
            g_padded[sl] += g @ kern_data[tap].T
        g_a = g_padded[padding: padding + t_in]
        return g_a, g_kernel

    return _emit(data, (a, kernel), backward, "conv1d")


def conv2d(a, kernel, stride: tuple[int, int] = (1, 1), padding: tuple[int, int] = (0, 0)) -> Tensor:
    """2-D convolution: input (H, W, C_in), kernel (kh, kw, C_in, C_out)."""
    a, kernel = _wrap(a), _wrap(kernel)
    if a.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs input (H, W, C_in) and kernel (kh, kw, C_in, C_out), got {a.shape}, {kernel.shape}")
    h_in, w_in, c_in = a.shape
    kh, kw, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {c_in}, kernel {kc_in}")
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"conv2d needs positive strides and non-negative padding, got {stride}, {padding}")
    h_pad, w_pad = h_in + 2 * ph, w_in + 2 * pw
    if kh > h_pad or kw > w_pad:
        raise ShapeError(f"conv2d kernel {(kh, kw)} exceeds padded size {(h_pad, w_pad)}")
    h_out = (h_pad - kh) // sh + 1
    w_out = (w_pad - kw) // sw + 1
    padded = np.pad(a.data, ((ph, ph), (pw, pw), (0, 0)))
    data = np.zeros((h_out, w_out, c_out))
    for i in range(kh):
        for j in range(kw):
            win = padded[i: i + sh * (h_out - 1) + 1: sh, j: j + sw * (w_out - 1) + 1: sw]
            data += win @ kernel.data[i, j]
    kern_data = kernel.data

    def backward(g):
        g_kernel = np.zeros(kern_data.shape)
        g_padded = np.zeros(padded.shape)
        for i in range(kh):
            for j in range(kw):
                sl_h = slice(i, i + sh * (h_out - 1) + 1, sh)
                sl_w = slice(j, j + sw * (w_out - 1) + 1, sw)
                win = padded[sl_h, sl_w]
                g_kernel[i, j] = np.tensordot(win, g, axes=([0, 1], [0, 1]))
                g_padded[sl_h, sl_w] += g @ kern_data[i, j].T
        g_a = g_padded[ph: ph + h_in, pw: pw + w_in]
        return g_a, g_kernel

    return _emit(data, (a, kernel), backward, "conv2d")


def depthwise_conv1d(a, kernel) -> Tensor:
    """Per-channel 1-D convolution with same-length output.

    Input (T, C), kernel (k, C) with odd k; each channel is filtered by
    its own k-tap kernel, zero-padded by k//2 on both sides.
    """
    a, kernel = _wrap(a), _wrap(kernel)
    if a.ndim != 2 or kernel.ndim != 2 or a.shape[1] != kernel.shape[1]:
        raise ShapeError(f"depthwise_conv1d needs (T, C) and (k, C), got {a.shape}, {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 != 1:
        raise ShapeError(f"depthwise_conv1d needs an odd kernel size, got {k}")
    t_in = a.shape[0]
    pad = k // 2
    padded = np.pad(a.data, ((pad, pad), (0, 0)))
    data = np.zeros(a.shape)
    for tap in range(k):
        data += padded[tap: tap + t_in] * kernel.data[tap]
    kern_data = kernel.data

    def backward(g):
        g_kernel = np.zeros(kern_data.shape)
        g_padded = np.zeros(padded.shape)
        for tap in range(k):
            g_kernel[tap] = (g * padded[tap: tap + t_in]).sum(axis=0)
            g_padded[tap: tap + t_in] += g * kern_data[tap]
        return g_padded[pad: pad + t_in], g_kernel

    return _emit(data, (a, kernel), backward, "depthwise_conv1d")


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate
    at a time. The independent yardstick the analytic rules are checked
    against, so it deliberately shares no code with the tape."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    base = x.copy()
    for i in range(x.size):
        original = base.reshape(-1)[i]
        base.reshape(-1)[i] = original + step
        hi = fn(base)
        base.reshape(-1)[i] = original - step
        lo = fn(base)
        base.reshape(-1)[i] = original
        flat[i] = (hi - lo) / (2.0 * step)
    return grad
