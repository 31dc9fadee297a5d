"""tensor.py :: Dense tensors with tape-based reverse-mode differentiation.

A `Tensor` wraps a row-major numpy array. Every differentiable operation in
this module computes its result eagerly and, when at least one input takes
part in differentiation, appends an entry to the active `Tape` holding the
inputs, the output and a backward rule. `Tape.backward` replays the entries in
reverse and leaves gradients on the grad-enabled leaves.

Layout is channels-last throughout: images are `(H, W, C)`, batches of images
are `(B, H, W, C)`.
"""

from __future__ import annotations

import contextlib
import contextvars
import typing as t
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from lipfast.errors import DimensionError, UsageError

Backward = t.Callable[[np.ndarray], t.Sequence[t.Optional[np.ndarray]]]
Operand = t.Union["Tensor", float, int, np.ndarray]

_default_dtype = np.dtype(np.float32)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "lipfast_grad_enabled", default=True
)
_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "lipfast_active_tape", default=None
)


def get_default_dtype() -> np.dtype:
    """Return the dtype used for tensors built from Python values."""
    return _default_dtype


def set_default_dtype(dtype: t.Any) -> None:
    """Set the dtype used for tensors built from Python values.

    Args:
        dtype: A numpy floating dtype, e.g. `np.float64`

    """
    global _default_dtype
    resolved = np.dtype(dtype)
    if not np.issubdtype(resolved, np.floating):
        raise UsageError(f"default dtype must be floating, got {resolved}")
    _default_dtype = resolved


def resolve_dtype(dtype: t.Any = None) -> np.dtype:
    """Return `np.dtype(dtype)`, or the default dtype when None."""
    return _default_dtype if dtype is None else np.dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype: t.Any) -> t.Iterator[None]:
    """Temporarily switch the default dtype."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> t.Iterator[None]:
    """Evaluate operations without recording them on any tape."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    """Return whether operations are currently being recorded."""
    return _grad_enabled.get()


class Tensor:
    """N-dimensional array of reals that may take part in differentiation.

    The data array is never modified after construction; only `grad` is
    (re)assigned, by `Tape.backward`.
    """

    # Make `ndarray <op> Tensor` dispatch to the Tensor's reflected operator
    __array_priority__ = 100

    def __init__(
        self,
        data: t.Any,
        requires_grad: bool = False,
        dtype: t.Any = None,
    ) -> None:
        """Initialize a Tensor.

        Args:
            data: Array-like values. Floating numpy arrays keep their dtype
                  unless `dtype` is given; anything else is converted to the
                  default dtype.
            requires_grad: Whether gradients should flow into this tensor
            dtype: Explicit dtype

        """
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(
            data.dtype, np.floating
        ):
            array = np.asarray(data)
        else:
            array = np.asarray(data, dtype=_default_dtype)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        """Return the extents of the tensor."""
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        """Return the rank of the tensor."""
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        """Return the number of stored values."""
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        """Return the numpy dtype of the stored values."""
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Return the underlying array."""
        return self.data

    def item(self) -> float:
        """Return the value of a single-element tensor as a float."""
        if self.size != 1:
            raise UsageError(
                f"item() needs one element, shape is {self.shape}"
            )
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Backpropagate from this scalar through the active tape."""
        backward(self)

    def reshape(self, *shape: t.Any) -> Tensor:
        """Return `reshape(self, shape)`."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        """Return `transpose(self, axes)`."""
        return transpose(self, axes or None)

    def sum(
        self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
    ) -> Tensor:
        """Return `sum(self, axis, keepdims)`."""
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(
        self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
    ) -> Tensor:
        """Return `mean(self, axis, keepdims)`."""
        return mean(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, index: t.Any) -> Tensor:
        """Return `take(self, index)`."""
        return take(self, index)

    def __add__(self, other: Operand) -> Tensor:
        """Elementwise addition."""
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        """Reflected elementwise addition."""
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        """Elementwise subtraction."""
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        """Reflected elementwise subtraction."""
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        """Elementwise multiplication."""
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        """Reflected elementwise multiplication."""
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        """Elementwise division."""
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> Tensor:
        """Reflected elementwise division."""
        return div(other, self)

    def __neg__(self) -> Tensor:
        """Elementwise negation."""
        return scale(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        """Matrix product."""
        return matmul(self, other)

    def __repr__(self) -> str:
        """Provide a short human-readable representation."""
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Parameter(Tensor):
    """A grad-enabled leaf tensor owned by a layer."""

    def __init__(self, data: t.Any, dtype: t.Any = None) -> None:
        """Initialize a Parameter."""
        super().__init__(data, requires_grad=True, dtype=dtype)

    def assign(self, values: np.ndarray) -> None:
        """Replace the parameter values, keeping shape and dtype."""
        values = np.asarray(values)
        if values.shape != self.data.shape:
            raise DimensionError(
                f"cannot assign {values.shape} to parameter of shape "
                f"{self.shape}"
            )
        self.data = values.astype(self.dtype, copy=True)


@dataclass(frozen=True)
class TapeEntry:
    """One recorded operation."""

    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Backward


class Tape:
    """Ordered record of operations for reverse-mode differentiation.

    A tape is single-owner. Entering it as a context manager makes it the
    active tape for the current context (thread or task). Operations run
    with no active tape are not recorded.
    """

    def __init__(self) -> None:
        """Initialize an empty Tape."""
        self._entries: list[TapeEntry] = []
        self._outputs: set[int] = set()
        self._tokens: list[contextvars.Token] = []

    def __len__(self) -> int:
        """Return the number of recorded operations."""
        return len(self._entries)

    def __enter__(self) -> Tape:
        """Activate this tape."""
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info: t.Any) -> None:
        """Restore the previously active tape."""
        _active_tape.reset(self._tokens.pop())

    def record(
        self, output: Tensor, inputs: tuple[Tensor, ...], rule: Backward
    ) -> None:
        """Append an operation to the tape."""
        self._entries.append(TapeEntry(output, inputs, rule))
        self._outputs.add(id(output))

    def clear(self) -> None:
        """Drop every recorded operation."""
        self._entries.clear()
        self._outputs.clear()

    def backward(self, loss: Tensor) -> None:
        """Replay the tape in reverse, assigning `.grad` on leaves.

        Every grad-enabled leaf seen by the tape receives a gradient (zeros if
        `loss` does not depend on it). The tape is cleared afterwards.

        Args:
            loss: Scalar tensor produced on this tape

        """
        if loss.size != 1:
            raise UsageError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        produced = id(loss) in self._outputs
        if not produced and not loss.requires_grad:
            raise UsageError("loss was not produced on the active tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if not produced:
            leaves[id(loss)] = loss

        for entry in reversed(self._entries):
            for tensor in entry.inputs:
                if tensor.requires_grad and id(tensor) not in self._outputs:
                    leaves.setdefault(id(tensor), tensor)
            grad_out = grads.pop(id(entry.output), None)
            if grad_out is None:
                continue
            for tensor, grad_in in zip(entry.inputs, entry.backward(grad_out)):
                if grad_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad_in
                else:
                    grads[key] = grad_in

        for key, leaf in leaves.items():
            grad = grads.get(key)
            if grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            else:
                leaf.grad = np.array(
                    np.broadcast_to(grad, leaf.data.shape), dtype=leaf.dtype
                )
        self.clear()


def current_tape() -> Tape | None:
    """Return the tape active in this context, if any."""
    return _active_tape.get()


def backward(loss: Tensor) -> None:
    """Backpropagate `loss` through the active tape."""
    tape = _active_tape.get()
    if tape is None:
        raise UsageError("backward needs an active Tape")
    tape.backward(loss)


def _record(
    data: np.ndarray, inputs: tuple[Tensor, ...], rule: Backward
) -> Tensor:
    out = Tensor(np.asarray(data))
    tape = _active_tape.get()
    if (
        tape is not None
        and _grad_enabled.get()
        and any(x.requires_grad for x in inputs)
    ):
        out.requires_grad = True
        tape.record(out, inputs, rule)
    return out


def _lift(value: Operand, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(value, dtype=dtype))


def _pair(a: Operand, b: Operand) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    if isinstance(b, Tensor):
        return _lift(a, b), b
    return _lift(a), _lift(b)


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"cannot broadcast shapes {a.shape} and {b.shape}"
        ) from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(
    axis: int | tuple[int, ...] | None, ndim: int
) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def add(a: Operand, b: Operand) -> Tensor:
    """Elementwise `a + b` with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    """Elementwise `a - b` with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    """Elementwise `a * b` with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a: Operand, b: Operand) -> Tensor:
    """Elementwise `a / b` with broadcasting."""
    a, b = _pair(a, b)
    _broadcast_check(a, b)
    return _record(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = np.asarray(factor, dtype=x.dtype)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast.

    Raises:
        DimensionError: if either operand has rank < 2 or the inner extents
                        disagree

    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.shape} x {b.shape}"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(
            f"matmul cannot broadcast {a.shape} x {b.shape}"
        ) from None

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _record(out, (a, b), rule)


def sum_(
    x: Tensor,
    axis: int | tuple[int, ...] | None = None,
    keepdims: bool = False,
) -> Tensor:
    """Sum over `axis` (all axes when None)."""
    axes = _normalize_axes(axis, x.ndim)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _record(x.data.sum(axis=axes, keepdims=keepdims), (x,), rule)


def mean(
    x: Tensor,
    axis: int | tuple[int, ...] | None = None,
    keepdims: bool = False,
) -> Tensor:
    """Arithmetic mean over `axis` (all axes when None)."""
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axis=axes, keepdims=keepdims), 1.0 / count)


def relu(x: Tensor) -> Tensor:
    """Rectified linear unit."""
    positive = x.data > 0
    return _record(x.data * positive, (x,), lambda g: (g * positive,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function."""
    s = special.expit(x.data)
    return _record(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit, `x * sigmoid(x)`."""
    s = special.expit(x.data)
    return _record(
        x.data * s, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),)
    )


def softplus(x: Tensor) -> Tensor:
    """`log(1 + exp(x))`, evaluated without overflow."""
    return _record(
        np.logaddexp(0, x.data), (x,), lambda g: (g * special.expit(x.data),)
    )


def exp(x: Tensor) -> Tensor:
    """Elementwise exponential."""
    e = np.exp(x.data)
    return _record(e, (x,), lambda g: (g * e,))


def sqrt(x: Tensor, eps: float = 0.0) -> Tensor:
    """Elementwise `sqrt(x + eps)`."""
    root = np.sqrt(x.data + np.asarray(eps, dtype=x.dtype))
    return _record(root, (x,), lambda g: (g * 0.5 / root,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    s = special.softmax(x.data, axis=-1)
    return _record(
        s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    )


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    ls = special.log_softmax(x.data, axis=-1)
    return _record(
        ls,
        (x,),
        lambda g: (g - np.exp(ls) * g.sum(axis=-1, keepdims=True),),
    )


def reshape(x: Tensor, shape: t.Sequence[int]) -> Tensor:
    """Row-major reshape."""
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(
            f"cannot reshape {x.shape} into {tuple(shape)}"
        ) from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: t.Sequence[int] | None = None) -> Tensor:
    """Permute axes (reverse them when `axes` is None)."""
    perm = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in perm) != list(range(x.ndim)):
        raise DimensionError(f"{perm} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(perm))
    return _record(
        x.data.transpose(perm), (x,), lambda g: (g.transpose(inverse),)
    )


def swap_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    perm = list(range(x.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return transpose(x, perm)


def pad(
    x: Tensor, widths: t.Sequence[tuple[int, int]], value: float = 0.0
) -> Tensor:
    """Pad with a constant; `widths` holds `(before, after)` per axis."""
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim or any(w < 0 for pair in widths for w in pair):
        raise DimensionError(f"bad pad widths {widths} for shape {x.shape}")
    index = tuple(
        slice(before, before + extent)
        for (before, _), extent in zip(widths, x.shape)
    )
    out = np.pad(x.data, widths, mode="constant", constant_values=value)
    return _record(out, (x,), lambda g: (g[index],))


def take(x: Tensor, index: t.Any) -> Tensor:
    """Numpy-style indexing; gradients scatter back with `np.add.at`."""

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _record(x.data[index], (x,), rule)


def concat(tensors: t.Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along `axis`."""
    tensors = tuple(tensors)
    try:
        out = np.concatenate([x.data for x in tensors], axis=axis)
    except ValueError:
        shapes = [x.shape for x in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes}") from None
    bounds = np.cumsum([x.shape[axis] for x in tensors])[:-1]
    return _record(
        out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of a `(..., H, W, C)` map."""
    if x.ndim < 3:
        raise DimensionError(f"expected (..., H, W, C), got {x.shape}")
    return mean(x, axis=(-3, -2))


def _conv_geometry(
    h: int, w: int, kh: int, kw: int, stride: int, padding: int
) -> tuple[int, int]:
    if kh < 1 or kw < 1 or stride < 1 or padding < 0:
        raise DimensionError(
            f"invalid window: kernel {(kh, kw)}, stride {stride}, "
            f"padding {padding}"
        )
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise DimensionError(
            f"kernel {(kh, kw)} with padding {padding} does not fit a "
            f"{(h, w)} input"
        )
    return out_h, out_w


def patches(
    x: Tensor, kh: int, kw: int, stride: int = 1, padding: int = 0
) -> Tensor:
    """Extract sliding windows (im2col).

    Args:
        x: Batch of images `(B, H, W, C)`
        kh: Window height
        kw: Window width
        stride: Step between windows
        padding: Zero padding on every spatial border

    Returns:
        Tensor of shape `(B, H', W', kh, kw, C)`

    """
    if x.ndim != 4:
        raise DimensionError(f"expected (B, H, W, C), got {x.shape}")
    batch, h, w, channels = x.shape
    out_h, out_w = _conv_geometry(h, w, kh, kw, stride, padding)
    pads = ((0, 0), (padding, padding), (padding, padding), (0, 0))
    padded = np.pad(x.data, pads)
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :out_h, :out_w]
    out = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(padded)
        rows = stride * (out_h - 1) + 1
        cols = stride * (out_w - 1) + 1
        for i in range(kh):
            for j in range(kw):
                grad[:, i : i + rows : stride, j : j + cols : stride, :] += g[
                    :, :, :, i, j, :
                ]
        return (grad[:, padding : padding + h, padding : padding + w, :],)

    return _record(out, (x,), rule)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, computed as im2col followed by a matmul.

    Args:
        x: `(H, W, Cin)` or `(B, H, W, Cin)`
        w: `(kh, kw, Cin, Cout)`
        stride: Spatial step
        padding: Zero padding on every spatial border

    Returns:
        `(H', W', Cout)` or `(B, H', W', Cout)` with
        `H' = (H + 2 padding - kh) // stride + 1`

    """
    if w.ndim != 4:
        raise DimensionError(f"conv weight must be 4-D, got {w.shape}")
    xb, squeeze = _batched(x)
    kh, kw, cin, cout = w.shape
    if xb.shape[-1] != cin:
        raise DimensionError(
            f"conv input has {xb.shape[-1]} channels, weight {w.shape} "
            f"expects {cin}"
        )
    cols = patches(xb, kh, kw, stride, padding)
    batch, out_h, out_w = cols.shape[:3]
    flat = reshape(cols, (batch, out_h, out_w, kh * kw * cin))
    out = matmul(flat, reshape(w, (kh * kw * cin, cout)))
    return reshape(out, out.shape[1:]) if squeeze else out


def depthwise_conv2d(
    x: Tensor, w: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Per-channel 2-D cross-correlation.

    Args:
        x: `(H, W, C)` or `(B, H, W, C)`
        w: `(kh, kw, C)`
        stride: Spatial step
        padding: Zero padding on every spatial border

    """
    if w.ndim != 3:
        raise DimensionError(f"depthwise weight must be 3-D, got {w.shape}")
    xb, squeeze = _batched(x)
    kh, kw, channels = w.shape
    if xb.shape[-1] != channels:
        raise DimensionError(
            f"depthwise input has {xb.shape[-1]} channels, weight expects "
            f"{channels}"
        )
    cols = patches(xb, kh, kw, stride, padding)
    out = sum_(mul(cols, w), axis=(3, 4))
    return reshape(out, out.shape[1:]) if squeeze else out
