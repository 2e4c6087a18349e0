"""Dense float64 arrays with reverse-mode automatic differentiation.

Operations record themselves on the active :class:`Tape` whenever one of their
inputs requires a gradient. Outside a tape nothing is recorded, which is how
inference runs. ``Tape.backward`` walks the recorded nodes in reverse order,
visiting each exactly once, then clears the tape.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
        tape.backward(loss)
    w.grad  # d loss / d w
"""

from __future__ import annotations

from contextvars import ContextVar
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import fft
from scipy.special import erf, expit

from .errors import ShapeError
from .validators import validate_rate

Array = NDArray[np.float64]
Operand = Union["Tensor", ArrayLike]
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("inertrack_active_tape", default=None)


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data: ArrayLike, requires_grad: bool = False) -> None:
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None
        self.node_id: Optional[int] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""
        self._tape: Optional[Tape] = None

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return transpose(self, axes)


class Tape:
    """Ordered record of the operations executed while the tape is active."""

    def __init__(self) -> None:
        self.nodes: List[Tensor] = []
        self._tokens: list = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc_info) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Tensor) -> None:
        node.node_id = len(self.nodes)
        node._tape = self
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate ``d loss / d leaf`` into every leaf that requires a gradient."""

        if loss.size != 1:
            raise ShapeError("backward (loss must be scalar)", loss.shape, ())
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes[: loss.node_id + 1]):
            if node.grad is None or node._backward is None:
                continue
            for parent, grad in zip(node._parents, node._backward(node.grad)):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(grad, dtype=np.float64)
                else:
                    parent.grad = parent.grad + grad
            if node is not loss:
                node.grad = None
        self.reset()

    def reset(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node._tape = None
        self.nodes.clear()


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> None:
    """Run the backward pass on the tape ``loss`` was recorded on."""

    if loss._tape is None:
        raise ValueError("loss is not recorded on an active tape")
    loss._tape.backward(loss)


# ----------------------------------------------------------------------
# Recording helpers
# ----------------------------------------------------------------------
def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: Array, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
        tape.record(out)
    return out


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------
def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def power(x: Operand, exponent: float) -> Tensor:
    x = as_tensor(x)
    return _result(
        x.data**exponent,
        (x,),
        lambda g: (g * exponent * x.data ** (exponent - 1),),
        "pow",
    )


def maximum(x: Operand, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` with gradient flowing where ``x > floor``."""

    x = as_tensor(x)
    return _result(np.maximum(x.data, floor), (x,), lambda g: (g * (x.data > floor),), "maximum")


def sqrt(x: Operand) -> Tensor:
    """Square root whose adjoint is taken as zero at ``x == 0``."""

    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward_fn(g: Array):
        return (np.divide(0.5 * g, out, out=np.zeros_like(out), where=out > 0),)

    return _result(out, (x,), backward_fn, "sqrt")


def exp(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def sigmoid(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Operand) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out**2),), "tanh")


def gelu(x: Operand) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""

    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / np.sqrt(2.0 * np.pi)
    return _result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


# ----------------------------------------------------------------------
# Shape manipulation
# ----------------------------------------------------------------------
def matmul(a: Operand, b: Operand) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n] -> [..., m, n]``."""

    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward_fn(g: Array):
        grad_a = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        grad_b = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return _result(a.data @ b.data, (a, b), backward_fn, "matmul")


def transpose(x: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""

    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def slice_(x: Operand, index) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g: Array):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward_fn, "slice")


def concat(tensors: Sequence[Operand], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in tensors)) from None
    return _result(
        out,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
        "stack",
    )


def take(x: Operand, indices: NDArray[np.int64], axis: int) -> Tensor:
    """Gather ``indices`` along ``axis`` (indices may be multi-dimensional)."""

    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim

    def backward_fn(g: Array):
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        return (full,)

    return _result(np.take(x.data, indices, axis=axis), (x,), backward_fn, "take")


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------
def sum_(x: Operand, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)

    def backward_fn(g: Array):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), backward_fn, "sum")


def mean(x: Operand, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis=axes, keepdims=keepdims), 1.0 / count)


def cumsum(x: Operand, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return _result(
        np.cumsum(x.data, axis=axis),
        (x,),
        lambda g: (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),),
        "cumsum",
    )


def softmax(x: Operand, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _result(
        out,
        (x,),
        lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),),
        "softmax",
    )


# ----------------------------------------------------------------------
# Network building blocks
# ----------------------------------------------------------------------
def layer_norm(x: Operand, gain: Operand, bias: Operand, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""

    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    if eps < 0:
        raise ValueError("eps cannot be negative")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered**2, axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std

    def backward_fn(g: Array):
        d_norm = g * gain.data
        d_x = inv_std * (
            d_norm
            - d_norm.mean(axis=-1, keepdims=True)
            - normalized * np.mean(d_norm * normalized, axis=-1, keepdims=True)
        )
        return d_x, _unbroadcast(g * normalized, gain.shape), _unbroadcast(g, bias.shape)

    return _result(normalized * gain.data + bias.data, (x, gain, bias), backward_fn, "layer_norm")


def dropout_mask(shape: Tuple[int, ...], p: float, key: Sequence[int]) -> Array:
    """Scaled keep-mask from a counter-based generator keyed by ``key``."""

    generator = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))
    return (generator.random(shape) >= p) / (1.0 - p)


def dropout(x: Operand, p: float, train: bool, key: Sequence[int]) -> Tensor:
    """Inverted dropout; exact identity when ``train`` is false or ``p == 0``."""

    x = as_tensor(x)
    validate_rate(p, "p")
    if not train or p == 0.0:
        return x
    mask = dropout_mask(x.shape, p, key)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def depthwise_conv1d(x: Operand, kernel: Operand) -> Tensor:
    """Per-channel 1-D convolution over the time axis of ``[..., L, C]`` with same padding."""

    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim < 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[-1] or kernel.shape[0] % 2 == 0:
        raise ShapeError("depthwise_conv1d", x.shape, kernel.shape)
    taps, channels = kernel.shape
    length = x.shape[-2]
    pad = taps // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    padded = np.pad(x.data, widths)
    out = np.zeros_like(x.data)
    for k in range(taps):
        out += padded[..., k:k + length, :] * kernel.data[k]

    def backward_fn(g: Array):
        d_padded = np.zeros_like(padded)
        d_kernel = np.empty_like(kernel.data)
        for k in range(taps):
            d_padded[..., k:k + length, :] += g * kernel.data[k]
            d_kernel[k] = (g * padded[..., k:k + length, :]).reshape(-1, channels).sum(axis=0)
        return d_padded[..., pad:pad + length, :], d_kernel

    return _result(out, (x, kernel), backward_fn, "depthwise_conv1d")


def pointwise_conv1d(x: Operand, weight: Operand) -> Tensor:
    """Kernel-size-one convolution mixing channels: ``[..., L, C] -> [..., L, C']``."""

    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("pointwise_conv1d", x.shape, weight.shape)
    return matmul(x, weight)


def dct2(x: Operand) -> Tensor:
    """Orthonormal DCT-II along the time axis of ``[..., L, C]``; its adjoint is the DCT-III."""

    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("dct2", x.shape, ("L", "C"))
    return _result(
        fft.dct(x.data, type=2, norm="ortho", axis=-2),
        (x,),
        lambda g: (fft.dct(g, type=3, norm="ortho", axis=-2),),
        "dct2",
    )


def dct3(x: Operand) -> Tensor:
    """Orthonormal DCT-III (inverse of :func:`dct2`) along the time axis."""

    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("dct3", x.shape, ("L", "C"))
    return _result(
        fft.dct(x.data, type=3, norm="ortho", axis=-2),
        (x,),
        lambda g: (fft.dct(g, type=2, norm="ortho", axis=-2),),
        "dct3",
    )


# ----------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------
def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare ``backward`` against central differences.

    Returns the largest absolute discrepancy divided by the largest gradient
    magnitude seen among the checked elements. ``max_elements`` caps the number
    of sampled entries per input (chosen with a seeded generator).
    """

    for tensor in inputs:
        tensor.grad = None
    with Tape() as tape:
        out = fn(*inputs)
        tape.backward(out)
    rng = np.random.default_rng(seed)

    analytic, numeric = [], []
    for tensor in inputs:
        grad = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
        flat = tensor.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            positions = rng.choice(flat.size, size=max_elements, replace=False)
        for position in positions:
            original = flat[position]
            flat[position] = original + h
            plus = fn(*inputs).item()
            flat[position] = original - h
            minus = fn(*inputs).item()
            flat[position] = original
            numeric.append((plus - minus) / (2.0 * h))
            analytic.append(grad.reshape(-1)[position])

    analytic_arr, numeric_arr = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.max(np.abs(analytic_arr), initial=0.0), np.max(np.abs(numeric_arr), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic_arr - numeric_arr)) / scale)
