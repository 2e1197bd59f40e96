"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op in this module records one node on the active
:class:`Tape`.  :func:`backward` walks the tape in reverse, deposits
gradients into the leaves that asked for them and clears the tape, so a
second call without a fresh forward pass raises instead of silently
accumulating twice.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the float type used for new tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """An N-d float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __truediv__(self, scalar: float):
        return mul(self, 1.0 / scalar)

    def sum(self):
        return tsum(self)


@dataclass(eq=False)
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str
    tape: "Tape"
    epoch: int


@dataclass(eq=False)
class Tape:
    """Ordered record of executed ops; inputs always precede their consumers."""

    nodes: list[_Node] = field(default_factory=list)
    epoch: int = 0

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn, op: str) -> None:
        node = _Node(out, inputs, backward_fn, op, self, self.epoch)
        out._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()
        self.epoch += 1

    def holds(self, tensor: Tensor) -> bool:
        node = tensor._node
        return node is not None and node.tape is self and node.epoch == self.epoch

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = [Tape()]
    return stack


def current_tape() -> Tape:
    return _tape_stack()[-1]


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def use_tape(tape: Tape):
    stack = _tape_stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


@contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {what}")


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_tape().record(out, inputs, backward_fn, op)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and clear the tape."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise RuntimeError("loss was not produced by a recorded op (no grad path)")
    tape = node.tape
    if not tape.holds(loss):
        raise RuntimeError("tape already consumed: run a new forward pass before calling backward again")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            _check_finite(gi, f"backward of {node.op}")
            if inp.is_leaf or not tape.holds(inp):
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
    tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise and reshaping ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back, "mul")


def tsum(x: Tensor) -> Tensor:
    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), back, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    def back(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), back, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), back, "relu")


# --- convolution ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ValueError(f"kernel {kernel} exceeds padded extent {size + 2 * padding}")
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Gather receptive fields into rows of shape (N*H'*W', kh*kw*C).

    Columns are ordered (kernel row, kernel column, channel); the channel
    axis is innermost so every copy below moves contiguous runs.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back onto an N x C x H x W map."""
    n, c, h, w = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return np.ascontiguousarray(xp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))


def _kernel_matrix(weight: np.ndarray) -> np.ndarray:
    cout = weight.shape[0]
    return weight.transpose(0, 2, 3, 1).reshape(cout, -1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be N x C x H x W, got rank {x.ndim}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be Cout x Cin x kh x kw, got rank {weight.ndim}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    if kh > h + 2 * padding:
        raise ValueError(f"conv2d kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ValueError(f"conv2d kernel width {kw} exceeds padded input width {w + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    cols = im2col(x.data, kh, kw, stride, padding)
    wmat = _kernel_matrix(weight.data)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = col2im(g2 @ wmat, x.shape, kh, kw, stride, padding) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), inputs, back, "conv2d")


# --- pooling -------------------------------------------------------------------------------

def max_pool2d(x: Tensor, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Window maximum; gradient goes to the first maximal element in row-major order."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ValueError(f"max_pool2d input must be N x C x H x W, got rank {x.ndim}")
    n, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"pool window {k} exceeds input extent {h}x{w}")
    data = x.data
    if padding:
        data = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = sliding_window_view(data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    # flat (padded) input position of every argmax
    rows = np.arange(ho)[:, None] * stride + arg // k
    cols = np.arange(wo)[None, :] * stride + arg % k
    flat = (rows * wp + cols).reshape(n * c, ho * wo)

    def back(g):
        gx = np.zeros((n * c, hp * wp), dtype=g.dtype)
        g2 = g.reshape(n * c, ho * wo)
        if stride >= k:
            np.put_along_axis(gx, flat, g2, axis=1)
        else:
            np.add.at(gx, (np.arange(n * c)[:, None], flat), g2)
        gx = gx.reshape(n, c, hp, wp)
        return (gx[:, :, padding:padding + h, padding:padding + w],)

    return _result(np.ascontiguousarray(out), (x,), back, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool input must be N x C x H x W, got rank {x.ndim}")
    n, c, h, w = x.shape

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), back, "global_avg_pool")


# --- dense ---------------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"linear input must be N x F, got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"linear shape mismatch: input features {x.shape[1]}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, back, "linear")


# --- normalization -------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running per-channel statistics; starts at mean 0, variance 1."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> "BatchNormState":
        dtype = dtype or _DEFAULT_DTYPE
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Batch normalization over every axis except the channel axis 1.

    Works for N x C x H x W feature maps and N x C feature vectors alike.
    """
    if x.ndim not in (2, 4):
        raise ValueError(f"batch_norm expects rank 2 or 4 input, got rank {x.ndim}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise ValueError(f"batch_norm channel mismatch: input has {c} channels, "
                         f"gamma {gamma.shape}, beta {beta.shape}, stats {state.mean.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    m = x.size // c

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * m / max(m - 1, 1)
        state.mean *= 1 - momentum
        state.mean += momentum * mean
        state.var *= 1 - momentum
        state.var += momentum * unbiased
    else:
        mean, var = state.mean, state.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), back, "batch_norm")


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                 training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d input must be N x C x H x W, got rank {x.ndim}")
    return batch_norm(x, gamma, beta, state, training, eps, momentum)


# --- loss ----------------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x K, got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError("labels must be integer class ids")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, labels])

    def back(g):
        p = softmax(logits.data)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), back, "softmax_cross_entropy")
