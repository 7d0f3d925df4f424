"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` only when at least
one input requires a gradient.  Outside a tape (or with frozen inputs only)
they are plain numpy computations, which keeps inference cheap and makes the
frozen-teacher contract structural: a tensor that never required a gradient
never gets gradient storage.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "log",
    "maximum_const",
    "sum_all",
    "mean_all",
    "sum_rows",
    "pick",
    "conv2d",
    "depthwise_conv2d",
    "dense",
    "relu",
    "max_pool2d",
    "global_avg_pool2d",
    "flatten",
    "concat_channels",
    "dropout",
    "log_softmax",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-dimensional float array with an optional gradient slot.

    Storage defaults to float32.  Passing ``dtype=np.float64`` gives the
    64-bit shadow mode used for gradient checking.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float32
        self.data = np.asarray(data, dtype=dtype)
        if self.data.ndim > 0 and 0 in self.data.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block on tensors
    that require gradients are appended in execution order, which is a valid
    topological order.  A tape belongs to the thread that opened it.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn) -> None:
        self.nodes.append(_Node(op, tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict:
    """Propagate d(loss) back through ``tape``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``.  Returns a
    mapping from each such leaf to its gradient for this call.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in produced:
                leaves[key] = t
    out = {}
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
        out[t] = g
    if id(loss) in grads and loss.requires_grad and id(loss) not in produced:
        loss.grad = grads[id(loss)]
        out[loss] = loss.grad
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _finish(op: str, inputs, out_data: np.ndarray, backward_fn) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor(out_data, requires_grad=tape is not None, dtype=out_data.dtype)
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a), dtype=b.dtype if isinstance(b, Tensor) else None)
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b), dtype=a.dtype)
    return a, b


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _finish("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _finish("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    return _finish(
        "mul",
        (a, b),
        out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = x.dtype.type(c)
    return _finish("scale", (x,), x.data * c, lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _finish("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _finish("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def maximum_const(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; clamped entries pass no gradient."""
    keep = x.data >= floor
    out = np.where(keep, x.data, x.dtype.type(floor))
    return _finish("maximum_const", (x,), out, lambda g: (g * keep,))


# reductions ----------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _finish("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _finish("mean", (x,), out, lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the last axis of an N×K tensor, giving N."""
    out = x.data.sum(axis=-1)
    return _finish("sum_rows", (x,), out, lambda g: (np.broadcast_to(g[..., None], x.shape).copy(),))


def pick(x: Tensor, index) -> Tensor:
    """Select ``x[i, index[i]]`` for each row of an N×K tensor."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _finish("pick", (x,), out, bw)


# convolution ----------------------------------------------------------------


def _conv_out(size: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding
    if span < k:
        raise ShapeError(f"{axis}: padded extent {span} is smaller than kernel extent {k}")
    return (span - k) // stride + 1


def _check_stride_padding(stride: int, padding: int) -> None:
    if int(stride) < 1:
        raise ValueError(f"stride must be a positive int, got {stride}")
    if int(padding) < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKhKw kernel."""
    _check_stride_padding(stride, padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"input channels (axis 1 of input) = {c} but kernel input channels (axis 1 of kernel) = {ci}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel output channels (axis 0) = {o}")
    ho = _conv_out(h, kh, stride, padding, "height (axis 2)")
    wo = _conv_out(w, kw, stride, padding, "width (axis 3)")
    dtype = np.result_type(x.data, kernel.data)
    p = padding

    # im2col in channels-last order: rows are output pixels, columns (i, j, c)
    if kh == 1 and kw == 1 and p == 0:
        cols = x.data[:, :, ::stride, ::stride][:, :, :ho, :wo].transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
        xp[:, p : p + h, p : p + w] = x.data.transpose(0, 2, 3, 1)
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
        cols = cols.reshape(-1, kh * kw * c)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T + bias.data).astype(dtype, copy=False)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = np.ascontiguousarray((g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = np.ascontiguousarray(gxp[:, p : p + h, p : p + w].transpose(0, 3, 1, 2))
        return gx, gk, gb

    return _finish("conv2d", (x, kernel, bias), out, bw)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel cross-correlation with a C×1×Kh×Kw kernel."""
    _check_stride_padding(stride, padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"depthwise_conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    ck, one, kh, kw = kernel.shape
    if ck != c or one != 1:
        raise ShapeError(f"kernel must be {c}x1xKhxKw for {c} input channels (axis 1), got {kernel.shape}")
    if bias.shape != (c,):
        raise ShapeError(f"bias shape {bias.shape} does not match channel count {c}")
    ho = _conv_out(h, kh, stride, padding, "height (axis 2)")
    wo = _conv_out(w, kw, stride, padding, "width (axis 3)")
    xp = _pad(x.data, padding)
    k = kernel.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.data, kernel.data))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] * k[None, :, i, j, None, None]
    out += bias.data[None, :, None, None]

    def bw(g):
        gk = gx = None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    gk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xs)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * k[None, :, i, j, None, None]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk, gb

    return _finish("depthwise_conv2d", (x, kernel, bias), out, bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for an N×F input and F×G weight."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"input features (axis 1) = {x.shape[1]} but weight rows (axis 0) = {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight columns {weight.shape[1]}")
    out = x.data @ weight.data + bias.data

    def bw(g):
        return (
            g @ weight.data.T if x.requires_grad else None,
            x.data.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _finish("dense", (x, weight, bias), out, bw)


# activations and pooling ----------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _finish("relu", (x,), x.data * mask, lambda g: (g * mask,))


def max_pool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling; ties route the gradient to the first element in row-major order."""
    stride = window if stride is None else stride
    _check_stride_padding(stride, 0)
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    ho = _conv_out(h, window, stride, 0, "height (axis 2)")
    wo = _conv_out(w, window, stride, 0, "width (axis 3)")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho, wo, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * hit
        return (gx,)

    return _finish("max_pool2d", (x,), out, bw)


def global_avg_pool2d(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _finish(
        "global_avg_pool2d",
        (x,),
        out,
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),),
    )


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return _finish("flatten", (x,), out, lambda g: (g.reshape(shape),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join two NCHW tensors along channels, ``a`` first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects NCHW inputs, got {a.shape} and {b.shape}")
    for ax, label in ((0, "batch (axis 0)"), (2, "height (axis 2)"), (3, "width (axis 3)")):
        if a.shape[ax] != b.shape[ax]:
            raise ShapeError(f"concat_channels: {label} differs, {a.shape[ax]} vs {b.shape[ax]}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _finish("concat_channels", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout.  Identity when ``training`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _finish("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of an N×K tensor, stabilised by max subtraction."""
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"log_softmax expects N×K with K >= 2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _finish("log_softmax", (x,), out, lambda g: (g - soft * g.sum(axis=1, keepdims=True),))
