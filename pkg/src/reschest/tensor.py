"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every differentiable kernel below records one node on the active tape when
gradient recording is enabled and at least one input requires a gradient.
``backward`` sweeps the tape in reverse recorded order, so a tensor consumed
by several ops (the residual fan-out) accumulates the sum of its consumers'
gradients without any special handling.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class TapeError(RuntimeError):
    """Raised for misuse of the differentiation tape."""


class Tensor:
    """A row-major float32 array with an optional gradient slot.

    A float32 C-contiguous array passed in is wrapped, not copied.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # asarray keeps 0-d scalars 0-d, unlike ascontiguousarray
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: Node | None = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return tensor_add(self, other)

    def backward(self) -> None:
        backward(self)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass(eq=False)
class Node:
    """One recorded operation: output, inputs and the rule mapping the
    output gradient to per-input gradients (``None`` for inputs that need
    none)."""

    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str = ""


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out.tape_node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


class _TapeState(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.enabled = True


_state = _TapeState()


def get_tape() -> Tape:
    """The calling thread's active tape."""
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str = "") -> Tensor:
    """Wrap ``out_data`` in a Tensor and put it on the tape if needed.

    Kernels outside this module (the loss) use this to join the tape.
    """
    needs = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        node = Node(out, tuple(inputs), backward_fn, op)
        out.tape_node = node
        _state.tape.record(node)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    g = g.astype(DTYPE, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it, then clear the tape.

    Gradients accumulate into any pre-existing ``.grad`` buffers.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if loss.tape_node is None or not tape.nodes:
        raise TapeError("backward called without a recorded tape for this loss")

    # intermediate gradients live here; leaves receive them in .grad
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if t.tape_node is None:
                _accumulate(t, g)
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.asarray(g, dtype=DTYPE)
    tape.clear()


# --------------------------------------------------------------------------
# Elementwise and reductions
# --------------------------------------------------------------------------


def tensor_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"tensor_add shape mismatch: {a.shape} vs {b.shape}")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return record(
        np.asarray(x.data.sum(dtype=DTYPE), dtype=DTYPE),
        (x,),
        lambda g: (np.full(shape, g, dtype=DTYPE),),
        "sum",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def relu(x: Tensor) -> Tensor:
    # np.maximum keeps NaN, so a diverged activation is not silently zeroed
    mask = x.data > 0
    return record(np.maximum(x.data, DTYPE(0)), (x,), lambda g: (g * mask,), "relu")


# --------------------------------------------------------------------------
# Convolution and pooling
# --------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_window(h: int, w: int, kh: int, kw: int, stride: int, padding: int, op: str) -> None:
    if stride < 1:
        raise ShapeError(f"{op}: stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"{op}: padding must be non-negative, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"{op}: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) strided view, no copy
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _fold(cols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add window gradients (N, C, Ho, Wo, kh, kw) back onto the padded input."""
    out = np.zeros(xp_shape, dtype=DTYPE)
    hs = (ho - 1) * stride + 1
    ws = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += cols[:, :, :, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: (N, Cin, H, W), w: (Cout, Cin, kH, kW), b: (Cout,) or None.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match ({cout},)")
    _check_window(h, wd, kh, kw, stride, padding, "conv2d")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride, ho, wo)
    # (N, Ho, Wo, Cin, kh, kw) -> rows of the im2col matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    xp_shape = xp.shape
    wdata = w.data

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ cols).reshape(wdata.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wdata.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
            gxp = _fold(gcols.transpose(0, 3, 1, 2, 4, 5), xp_shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, _backward, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Windowed maximum; padded cells are -inf and ties go to the first
    row-major position in the window."""
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    n, c, h, wd = x.shape
    _check_window(h, wd, k, k, stride, padding, "maxpool2d")
    if padding > k // 2:
        raise ShapeError(f"maxpool2d: padding {padding} exceeds half the window {k}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if padding:
        xp = np.pad(
            x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf
        )
    else:
        xp = x.data
    win = _windows(xp, k, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    # np.argmax returns the first occurrence
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    xp_shape = xp.shape

    def _backward(g):
        onehot = np.zeros((n, c, ho, wo, k * k), dtype=DTYPE)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gxp = _fold(onehot.reshape(n, c, ho, wo, k, k), xp_shape, k, k, stride, ho, wo)
        return (gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp,)

    return record(np.ascontiguousarray(out), (x,), _backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    scale = DTYPE(1.0 / (h * w))

    def _backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).copy(),)

    return record(x.data.mean(axis=(2, 3), dtype=DTYPE), (x,), _backward, "global_avg_pool")


# --------------------------------------------------------------------------
# Dense and normalization layers
# --------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for x (N, Din), w (Dout, Din), b (Dout,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear dimension mismatch: x {x.shape}, w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear bias shape {b.shape} does not match ({w.shape[0]},)")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def _backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, _backward, "linear")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place:
    ``running = (1 - momentum) * running + momentum * batch_stat``.  The
    running variance tracks the unbiased batch variance; normalization uses
    the biased one.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    for t, label in ((gamma, "gamma"), (beta, "beta"), (running_mean, "running_mean"), (running_var, "running_var")):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm2d {label} shape {t.shape} does not match ({c},)")
    m = n * h * w
    xd = x.data
    gd = gamma.data

    if not training:
        inv_std = (1.0 / np.sqrt(running_var.data + DTYPE(eps))).astype(DTYPE)
        scale = gd * inv_std
        shift = beta.data - running_mean.data * scale
        out = xd * scale[None, :, None, None] + shift[None, :, None, None]
        x_hat = (xd - running_mean.data[None, :, None, None]) * inv_std[None, :, None, None]

        def _backward_eval(g):
            gx = g * scale[None, :, None, None]
            return gx, (g * x_hat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)), None, None

        return record(out.astype(DTYPE), (x, gamma, beta, running_mean, running_var), _backward_eval, "batchnorm2d")

    if m < 2:
        raise ShapeError("batchnorm2d in training mode needs at least 2 values per channel")
    mean = xd.mean(axis=(0, 2, 3), dtype=DTYPE)
    xc = xd - mean[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3), dtype=DTYPE)
    inv_std = (1.0 / np.sqrt(var + DTYPE(eps))).astype(DTYPE)
    x_hat = xc * inv_std[None, :, None, None]
    out = x_hat * gd[None, :, None, None] + beta.data[None, :, None, None]

    mom = DTYPE(momentum)
    running_mean.data[...] = (1 - mom) * running_mean.data + mom * mean
    running_var.data[...] = (1 - mom) * running_var.data + mom * var * DTYPE(m / (m - 1))

    def _backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * x_hat).sum(axis=(0, 2, 3))
        gx_hat = g * gd[None, :, None, None]
        gx = (inv_std / m)[None, :, None, None] * (
            m * gx_hat
            - gx_hat.sum(axis=(0, 2, 3))[None, :, None, None]
            - x_hat * (gx_hat * x_hat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
        return gx, ggamma, gbeta, None, None

    return record(out, (x, gamma, beta, running_mean, running_var), _backward, "batchnorm2d")
