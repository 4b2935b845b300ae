# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""Dense Numeric Kernel with Reverse-Mode Differentiation

Every primitive in this module works on :class:`ParamTensor` values. When a
:class:`GradTape` is active on the calling thread, primitives whose inputs
require a gradient are recorded on it, and :meth:`GradTape.backward` replays
the record in reverse to accumulate gradients.
"""

import logging
import threading

from collections import namedtuple
from contextlib import contextmanager
from typing import Any, Callable, Hashable, Iterable, NamedTuple, Optional, Sequence, Tuple

import numpy as np

LOGGER = logging.getLogger(__name__)

_ERR_EPS_RANGE = "eps must lie in [1e-7, 1e-3]: {0!s}"
_ERR_K_RANGE = "K must lie in [1, {1!s}]: {0!s}"
_ERR_NON_FINITE = "function value is not finite: {0!s}"
_ERR_NOT_SCALAR = "expected a scalar, got shape {0!s}"
_ERR_PRECISION = "unsupported precision: {0!s}"
_ERR_SHAPE = "{0!s}: incompatible shapes {1!s} and {2!s}"

PRECISIONS = {
    'float32': np.float32,
    'float64': np.float64,
}
"""Supported working precisions"""

DEFAULT_DTYPE = np.float64
"""Precision of tensors built from data that is not already float32 or float64"""

_LOCAL = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not agree."""


class EvaluationError(ArithmeticError):
    """Raised when a checked function produces a non-finite value."""


def resolve_dtype(name: str) -> type:
    """Returns the numpy type of a working precision.

    Args:
        name: ``float64`` or ``float32``

    Raises:
        ValueError: Unsupported precision name.
    """
    if name not in PRECISIONS:
        raise ValueError(_ERR_PRECISION.format(name))
    return PRECISIONS[name]


def _floating_dtype(data: Any) -> type:
    dtype = getattr(data, 'dtype', None)
    if dtype is not None and np.dtype(dtype).type in PRECISIONS.values():
        return np.dtype(dtype).type
    return DEFAULT_DTYPE


class ParamTensor:
    """A dense array with an accumulated-gradient slot.

    Args:
        data: Array-like initial contents.
        requires_grad: Track this tensor on an active tape.
        name: Optional label, used in diagnostics.
        copy: Copy ``data`` instead of wrapping it.
        dtype: Precision of the tensor. By default float32 and float64 arrays
            keep their precision and anything else becomes :data:`DEFAULT_DTYPE`.

    Note:
        ``grad`` stays ``None`` until a backward pass reaches the tensor.
    """
    __slots__ = ('data', 'grad', 'requires_grad', 'name')

    def __init__(self, data: Any, requires_grad: bool = False, name: str = None, copy: bool = True,
                 dtype: type = None) -> None:
        dtype = dtype or _floating_dtype(data)
        arr = np.array(data, dtype=dtype) if copy else np.asarray(data, dtype=dtype)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def dtype(self) -> type:
        """Numpy scalar type of the entries"""
        return self.data.dtype.type

    @property
    def shape(self) -> Tuple[int, ...]:
        """Dimension sizes"""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Number of dimensions"""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Number of entries"""
        return self.data.size

    def item(self) -> float:
        """Returns the value of a single-entry tensor as a float."""
        if self.data.size != 1:
            raise ValueError(_ERR_NOT_SCALAR.format(self.shape))
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        """Drops the accumulated gradient."""
        self.grad = None

    def __add__(self, other: Any) -> 'ParamTensor':
        return add(self, other)

    def __radd__(self, other: Any) -> 'ParamTensor':
        return add(other, self)

    def __sub__(self, other: Any) -> 'ParamTensor':
        return sub(self, other)

    def __rsub__(self, other: Any) -> 'ParamTensor':
        return sub(other, self)

    def __mul__(self, other: Any) -> 'ParamTensor':
        return mul(self, other)

    def __rmul__(self, other: Any) -> 'ParamTensor':
        return mul(other, self)

    def __truediv__(self, other: Any) -> 'ParamTensor':
        return div(self, other)

    def __neg__(self) -> 'ParamTensor':
        return mul(self, -1.0)

    def __matmul__(self, other: Any) -> 'ParamTensor':
        return matmul(self, other)

    def __getitem__(self, key: Any) -> 'ParamTensor':
        return gather(self, key)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ''
        return f"ParamTensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


TapeEntry = namedtuple('TapeEntry', 'op output inputs backward')
"""TapeEntry is one recorded primitive.

Attributes:
    op (str): Primitive name.
    output (ParamTensor): Tensor produced by the primitive.
    inputs (tuple): Tensors the primitive consumed.
    backward (callable): Receives the output gradient, accumulates input gradients.
"""


class GradTape:
    """Ordered record of primitives for reverse replay.

    A tape is active on the current thread while used as a context manager.

    Examples:
        >>> w = ParamTensor([[1.0, 2.0]], requires_grad=True)
        >>> with GradTape() as tape:
        >>>     loss = sum_(w * w)
        >>> tape.backward(loss)
        >>> w.grad
            array([[2., 4.]])
    """
    def __init__(self) -> None:
        self.entries = []

    def __enter__(self) -> 'GradTape':
        _stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, output: ParamTensor, inputs: Tuple[ParamTensor, ...],
               backward: Callable[[np.ndarray], None]) -> None:
        """Appends a primitive to the tape."""
        self.entries.append(TapeEntry(op, output, inputs, backward))

    def backward(self, loss: ParamTensor) -> None:
        """Replays the tape in reverse, seeding ``loss`` with a unit gradient.

        Args:
            loss: Single-entry tensor produced while this tape was active.

        Raises:
            ValueError: ``loss`` has more than one entry.
        """
        if loss.size != 1:
            raise ValueError(_ERR_NOT_SCALAR.format(loss.shape))
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            if entry.output.grad is not None:
                entry.backward(entry.output.grad)

    def first_non_finite(self) -> Optional[str]:
        """Names the first recorded tensor holding a NaN or Inf.

        Returns:
            ``"<op> (<input names>)"`` for the first offending entry, or None.
        """
        for entry in self.entries:
            for tensor in entry.inputs:
                if tensor.name and not np.all(np.isfinite(tensor.data)):
                    return tensor.name
            if not np.all(np.isfinite(entry.output.data)):
                names = ', '.join(t.name or '?' for t in entry.inputs)
                return f"{entry.op} ({names})"
        return None


def _stack() -> list:
    if not hasattr(_LOCAL, 'tapes'):
        _LOCAL.tapes = []
    return _LOCAL.tapes


def active_tape() -> Optional[GradTape]:
    """Returns the tape recording on this thread, if any."""
    tapes = _stack()
    return tapes[-1] if tapes else None


@contextmanager
def no_tape() -> None:
    """Suspends recording for the enclosed block."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def as_tensor(value: Any, like: Optional[ParamTensor] = None) -> ParamTensor:
    """Wraps ``value`` as a constant tensor unless it already is one.

    A wrapped constant takes the precision of ``like`` when given.
    """
    if isinstance(value, ParamTensor):
        return value
    return ParamTensor(value, copy=False, dtype=None if like is None else like.dtype)


def _pair(a: Any, b: Any) -> Tuple[ParamTensor, ParamTensor]:
    if isinstance(a, ParamTensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _emit(op: str, data: np.ndarray, inputs: Tuple[ParamTensor, ...],
          backward: Callable[[np.ndarray], None]) -> ParamTensor:
    # outputs keep the precision of their inputs
    out = ParamTensor(data, copy=False, dtype=np.result_type(*(t.data.dtype for t in inputs)).type)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, out, inputs, backward)
    return out


def _accumulate(tensor: ParamTensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.data.dtype).reshape(tensor.shape)
    else:
        tensor.grad = (tensor.grad + grad).astype(tensor.data.dtype, copy=False)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: ParamTensor, b: ParamTensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as error:
        raise ShapeError(_ERR_SHAPE.format(op, a.shape, b.shape)) from error


def add(a: Any, b: Any) -> ParamTensor:
    """Element-wise sum with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_check('add', a, b)

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return _emit('add', a.data + b.data, (a, b), backward)


def sub(a: Any, b: Any) -> ParamTensor:
    """Element-wise difference with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_check('sub', a, b)

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(-grad, b.shape))

    return _emit('sub', a.data - b.data, (a, b), backward)


def mul(a: Any, b: Any) -> ParamTensor:
    """Element-wise product with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_check('mul', a, b)

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    return _emit('mul', a.data * b.data, (a, b), backward)


def div(a: Any, b: Any) -> ParamTensor:
    """Element-wise quotient with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_check('div', a, b)
    out = a.data / b.data

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-grad * out / b.data, b.shape))

    return _emit('div', out, (a, b), backward)


def matmul(a: Any, b: Any) -> ParamTensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Raises:
        ShapeError: Inner dimensions disagree or an operand has rank below 2.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(_ERR_SHAPE.format('matmul', a.shape, b.shape))

    def backward(grad: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ grad, b.shape))

    return _emit('matmul', a.data @ b.data, (a, b), backward)


def transpose(a: ParamTensor) -> ParamTensor:
    """Swaps the last two axes."""
    a = as_tensor(a)

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, np.swapaxes(grad, -1, -2))

    return _emit('transpose', np.swapaxes(a.data, -1, -2), (a,), backward)


def reshape(a: ParamTensor, shape: Sequence[int]) -> ParamTensor:
    """Returns ``a`` with a new shape holding the same entries."""
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as error:
        raise ShapeError(_ERR_SHAPE.format('reshape', a.shape, tuple(shape))) from error

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, grad.reshape(a.shape))

    return _emit('reshape', out, (a,), backward)


def sum_(a: ParamTensor, axis: Optional[int] = None, keepdims: bool = False) -> ParamTensor:
    """Sum over ``axis`` (all entries when None)."""
    a = as_tensor(a)

    def backward(grad: np.ndarray) -> None:
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        _accumulate(a, np.broadcast_to(grad, a.shape))

    return _emit('sum', a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: ParamTensor, axis: Optional[int] = None, keepdims: bool = False) -> ParamTensor:
    """Mean over ``axis`` (all entries when None)."""
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def _basic_key(key: Any) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int)) for p in parts)


def gather(a: ParamTensor, key: Any) -> ParamTensor:
    """Indexes ``a`` with ``key`` (any numpy index); repeated indices accumulate gradient."""
    a = as_tensor(a)

    def backward(grad: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        if _basic_key(key):
            full[key] += grad
        else:
            np.add.at(full, key, grad)
        _accumulate(a, full)

    return _emit('gather', a.data[key], (a,), backward)


def scatter(a: ParamTensor, key: Any, shape: Sequence[int]) -> ParamTensor:
    """Adds the entries of ``a`` into a zero tensor of ``shape`` at ``key``."""
    a = as_tensor(a)
    out = np.zeros(shape, dtype=a.data.dtype)
    np.add.at(out, key, a.data)

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, grad[key])

    return _emit('scatter', out, (a,), backward)


def softmax_rows(x: ParamTensor, mask: Optional[np.ndarray] = None) -> ParamTensor:
    """Softmax over the last axis, stabilized by per-row max subtraction.

    Args:
        x: Input scores.
        mask: Optional boolean array broadcastable to ``x``. Entries where the
            mask is False receive probability 0. Every row needs one True entry.
    """
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(grad: np.ndarray) -> None:
        _accumulate(x, out * (grad - (grad * out).sum(axis=-1, keepdims=True)))

    return _emit('softmax', out, (x,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: ParamTensor) -> ParamTensor:
    """Element-wise ``x * sigmoid(x)``."""
    x = as_tensor(x)
    sig = _sigmoid(x.data)

    def backward(grad: np.ndarray) -> None:
        _accumulate(x, grad * (sig + x.data * sig * (1.0 - sig)))

    return _emit('silu', x.data * sig, (x,), backward)


def rms_norm(x: ParamTensor, weight: ParamTensor, eps: float = 1e-6) -> ParamTensor:
    """Scales each row of ``x`` to unit root-mean-square, then by ``weight``."""
    x, weight = _pair(x, weight)
    width = x.shape[-1]
    scale = (np.mean(x.data * x.data, axis=-1, keepdims=True) + eps) ** -0.5
    normed = x.data * scale

    def backward(grad: np.ndarray) -> None:
        if weight.requires_grad:
            _accumulate(weight, _unbroadcast(grad * normed, weight.shape))
        if x.requires_grad:
            gw = grad * weight.data
            dot = np.sum(gw * x.data, axis=-1, keepdims=True)
            _accumulate(x, scale * gw - (scale ** 3 / width) * x.data * dot)

    return _emit('rms_norm', normed * weight.data, (x, weight), backward)


def cross_entropy(logits: ParamTensor, targets: Sequence[int], reduction: str = 'mean') -> ParamTensor:
    """Softmax cross-entropy of ``logits`` rows against integer ``targets``.

    Args:
        logits: Tensor of shape (n, classes).
        targets: n class indices.
        reduction: ``mean`` or ``sum``

    Raises:
        ValueError: No rows or an unknown reduction.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    rows = logits.shape[0]
    if rows == 0 or targets.shape != (rows,):
        raise ShapeError(_ERR_SHAPE.format('cross_entropy', logits.shape, targets.shape))
    if reduction not in ('mean', 'sum'):
        raise ValueError(f"unknown reduction: {reduction}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = -log_probs[np.arange(rows), targets]
    factor = 1.0 / rows if reduction == 'mean' else 1.0

    def backward(grad: np.ndarray) -> None:
        probs = np.exp(log_probs)
        probs[np.arange(rows), targets] -= 1.0
        _accumulate(logits, probs * (grad * factor))

    return _emit('cross_entropy', np.asarray(picked.sum() * factor), (logits,), backward)


TopK = namedtuple('TopK', 'indices values')
"""TopK holds the result of :func:`topk`.

Attributes:
    indices (numpy.ndarray): Selected positions, descending by value.
    values (numpy.ndarray): Values at ``indices``.
"""


def topk(v: Any, k: int) -> TopK:
    """Selects the ``k`` largest entries along the last axis.

    Ties break toward the lowest index.

    Args:
        v: Vector, or matrix for row-wise selection.
        k: Number of entries to select.

    Returns:
        :class:`TopK`

    Raises:
        ValueError: ``k`` outside [1, len(v)].
    """
    v = np.asarray(v)
    if not 1 <= k <= v.shape[-1]:
        raise ValueError(_ERR_K_RANGE.format(k, v.shape[-1]))
    order = np.argsort(-v, axis=-1, kind='stable')[..., :k]
    return TopK(order, np.take_along_axis(v, order, axis=-1))


class GradCheckReport(NamedTuple):
    """Summary of :func:`grad_check`.

    Attributes:
        max_rel_err: Largest per-coordinate relative error.
        worst_index: Flat index of that coordinate, -1 when nothing was checked.
        checked: Coordinates compared.
        unstable: Coordinates skipped because ``signature`` changed under perturbation.
        max_abs_err: Largest per-coordinate absolute difference.
    """
    max_rel_err: float
    worst_index: int
    checked: int
    unstable: int
    max_abs_err: float = 0.0

    def passed(self, tolerance: float) -> bool:
        """True when some coordinate was compared and every relative error is below ``tolerance``."""
        return self.checked > 0 and self.max_rel_err < tolerance


def _evaluate(f: Callable[[ParamTensor], ParamTensor], x: ParamTensor) -> float:
    with no_tape():
        value = as_tensor(f(x)).item()
    if not np.isfinite(value):
        raise EvaluationError(_ERR_NON_FINITE.format(value))
    return value


def grad_check(f: Callable[[ParamTensor], ParamTensor], x: ParamTensor, eps: float = 1e-6,
               coords: Optional[Iterable[int]] = None, signature: Optional[Callable[[], Hashable]] = None,
               floor: float = 1e-8) -> GradCheckReport:
    """Compares tape gradients against central finite differences.

    ``x`` keeps its values and its ``requires_grad`` flag, also when an
    evaluation raises.

    Args:
        f: Scalar-valued function of ``x``. It may read other tensors.
        x: Tensor to perturb. Its gradient slot is reset.
        eps: Perturbation size.
        coords: Flat indices to compare. Default is every coordinate.
        signature: Called after each evaluation of ``f``. Coordinates whose
            perturbations change the returned value are counted as unstable
            and left out of the comparison.
        floor: Absolute floor of the relative-error denominator.

    Returns:
        :class:`GradCheckReport`. A report with ``checked == 0`` never passes.

    Raises:
        EvaluationError: ``f`` returned a non-finite value.
        ValueError: ``eps`` out of range.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(_ERR_EPS_RANGE.format(eps))

    was_tracked = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    try:
        with GradTape() as tape:
            value = as_tensor(f(x))
        if not np.isfinite(value.item()):
            raise EvaluationError(_ERR_NON_FINITE.format(value.item()))
        base = signature() if signature else None
        tape.backward(value)
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()

        worst, worst_index, worst_abs, checked, unstable = 0.0, -1, 0.0, 0, 0
        for index in (range(x.size) if coords is None else coords):
            original = x.data.flat[index]
            try:
                x.data.flat[index] = original + eps
                plus = _evaluate(f, x)
                moved = signature is not None and signature() != base
                x.data.flat[index] = original - eps
                minus = _evaluate(f, x)
                moved = moved or (signature is not None and signature() != base)
            finally:
                x.data.flat[index] = original
            if moved:
                unstable += 1
                continue
            numeric = (plus - minus) / (2.0 * eps)
            diff = abs(analytic[index] - numeric)
            err = diff / max(abs(analytic[index]), abs(numeric), floor)
            checked += 1
            worst_abs = max(worst_abs, diff)
            if err > worst or worst_index < 0:
                worst, worst_index = err, int(index)
    finally:
        x.requires_grad = was_tracked

    if checked == 0:
        LOGGER.warning("grad_check %s: no stable coordinate was compared (%d unstable)", x.name, unstable)
    LOGGER.debug("grad_check %s: max_rel_err=%.3e max_abs_err=%.3e over %d coords (%d unstable)",
                 x.name, worst, worst_abs, checked, unstable)
    return GradCheckReport(float(worst), worst_index, checked, unstable, float(worst_abs))
