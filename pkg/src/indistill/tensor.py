"""Dense N-d arrays with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy buffers (float32 by default, float64 via
:func:`float64_mode` for gradient checking). Operations executed while a
:class:`GradTape` is active append their results to the tape in creation
order, which is already a valid topological order, so `backward` is a single
deterministic reverse sweep. All reductions happen in a fixed sequential
order; repeated runs with identical inputs are bitwise identical.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError, TapeError

__all__ = [
    "Tensor",
    "GradTape",
    "RunningStats",
    "no_grad",
    "backward",
    "float64_mode",
    "default_dtype",
    "set_default_dtype",
    "conv2d",
    "batchnorm2d",
    "dense",
    "relu",
    "maxpool2d",
    "adaptive_maxpool2d",
    "flatten",
    "softmax_with_temperature",
    "log_softmax",
    "take_channels",
    "pick_classes",
    "finite_diff_check",
]

_DEFAULT_DTYPE = np.dtype(np.float32)

# Stack of active tapes; `None` entries mark no-grad regions.
_TAPE_STACK: list["GradTape | None"] = []


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> np.dtype:
    """Set the storage dtype for newly created tensors; returns the old one."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ParameterError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt
    return old


@contextlib.contextmanager
def float64_mode():
    """Temporarily create tensors in 64-bit precision (gradient checking)."""
    old = set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(old)


def _active_tape() -> "GradTape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forward passes run detached."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class GradTape:
    """Append-only record of op results for one forward pass.

    Append order doubles as topological order, so the backward sweep visits
    each node exactly once, in reverse creation order. A tape is consumed by
    its first backward pass; reuse raises :class:`TapeError`.
    """

    __slots__ = ("_entries", "_consumed")

    def __init__(self):
        self._entries: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "unbalanced tape nesting"
        return False

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _record(self, t: "Tensor") -> None:
        self._entries.append(t)

    def backward(self, loss: "Tensor") -> None:
        backward(loss)


class Tensor:
    """A dense array plus an optional gradient buffer and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_backward", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._op: str = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._tape: GradTape | None = None

    # -- introspection -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        head = np.array2string(self.data, threshold=6, precision=4)
        return f"Tensor({head}, shape={self.shape}, op={self._op})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return _add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return _sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return _mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return _div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, p):
        return _pow(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- methods -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else _axis_count(self.shape, axis)
        return _sum(self, axis, keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self) -> "Tensor":
        return _transpose(self)

    @property
    def T(self) -> "Tensor":
        return _transpose(self)

    def exp(self) -> "Tensor":
        return _exp(self)

    def log(self) -> "Tensor":
        return _log(self)

    def sqrt(self) -> "Tensor":
        return _pow(self, 0.5)

    def relu(self) -> "Tensor":
        return relu(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _axis_count(shape: tuple[int, ...], axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for a in axes:
        n *= shape[a]
    return n


def _from_op(data: np.ndarray, parents: Sequence[Tensor], bw: Callable[[np.ndarray], None], op: str) -> Tensor:
    """Wrap an op result; record on the active tape when gradients can flow."""
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = tuple(parents)
        out._backward = bw
        out._tape = tape
        tape._record(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate gradients of every trainable leaf reachable from `loss`.

    `loss` must be scalar. The tape that recorded the forward pass is
    consumed; a second call without a fresh forward pass raises.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        # A constant loss has no tape: nothing depends on any leaf, so all
        # gradients are (implicitly) zero and this is a no-op.
        return
    if tape._consumed:
        raise TapeError("tape already consumed; run a fresh forward pass before backward")
    loss.grad = np.ones_like(loss.data)
    for t in reversed(tape._entries):
        if t.grad is not None and t._backward is not None:
            t._backward(t.grad)
    tape._consumed = True
    # Release saved activations; the tape cannot be replayed anyway.
    for t in tape._entries:
        t._backward = None
        t._parents = ()
    tape._entries.clear()


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(out, (a, b), bw, "add")


def _sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _from_op(out, (a, b), bw, "sub")


def _mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(out, (a, b), bw, "mul")


def _div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _from_op(out, (a, b), bw, "div")


def _neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _from_op(-a.data, (a,), bw, "neg")


def _pow(a: Tensor, p) -> Tensor:
    if not isinstance(p, (int, float)):
        raise ParameterError("power exponent must be a Python scalar")
    out = a.data ** p

    def bw(g):
        _accum(a, g * (p * a.data ** (p - 1)))

    return _from_op(out, (a,), bw, f"pow{p}")


def _exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _from_op(out, (a,), bw, "exp")


def _log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _from_op(out, (a,), bw, "log")


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, tuple(sorted(ax % a.data.ndim for ax in axes)))
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False))

    return _from_op(np.asarray(out), (a,), bw, "sum")


def _reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _from_op(out, (a,), bw, "reshape")


def _transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {a.ndim}-d")
    out = np.ascontiguousarray(a.data.T)

    def bw(g):
        _accum(a, g.T)

    return _from_op(out, (a,), bw, "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-d tensors")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner axes disagree: left axis 1 = {a.shape[1]}, right axis 0 = {b.shape[0]}"
        )
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _from_op(out, (a, b), bw, "matmul")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _from_op(out, (a,), bw, "relu")


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    a = _as_tensor(a)
    return _reshape(a, (a.shape[0], -1) if a.ndim > 1 else (a.size,))


# ---------------------------------------------------------------------------
# neural-network ops
# ---------------------------------------------------------------------------


def _conv_out(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                                  j : j + stride * (wo - 1) + 1 : stride]
    return cols


def _col2im(dcols: np.ndarray, xp_shape: tuple[int, ...], stride: int) -> np.ndarray:
    n, c, kh, kw, ho, wo = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution (cross-correlation) over a batched NCHW input.

    The kernel layout is (in_channels, out_channels, k, k); filter `i` lives
    on axis 1. Output spatial size is floor((h + 2*padding - k)/stride) + 1.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-d (n, c, h, w), got {x.ndim}-d")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-d (c_in, c_out, k, k), got {kernel.ndim}-d")
    n, c_in, h, w = x.shape
    kc_in, c_out, kh, kw = kernel.shape
    if kc_in != c_in:
        raise DimensionError(
            f"channel axis mismatch: input axis 1 = {c_in}, kernel axis 0 = {kc_in}"
        )
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias axis 0 = {bias.shape}, expected ({c_out},)")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"no valid output position: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n, c_in * kh * kw, ho * wo)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(c_in * kh * kw, c_out)
    out = np.matmul(cols.transpose(0, 2, 1), wmat)          # (n, ho*wo, c_out)
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, c_out, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gmat = g.reshape(n, c_out, ho * wo).transpose(0, 2, 1)   # (n, l, c_out)
        if kernel.requires_grad:
            dw = np.matmul(cols, gmat).sum(axis=0)               # (c_in*k*k, c_out)
            dw = dw.reshape(c_in, kh, kw, c_out).transpose(0, 3, 1, 2)
            _accum(kernel, np.ascontiguousarray(dw))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(gmat, wmat.T).transpose(0, 2, 1)
            dcols = dcols.reshape(n, c_in, kh, kw, ho, wo)
            dxp = _col2im(dcols, xp.shape, stride)
            _accum(x, dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _from_op(out, parents, bw, "conv2d")


@dataclass
class RunningStats:
    """Per-channel running mean/variance owned by a batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype=None) -> "RunningStats":
        dt = dtype or _DEFAULT_DTYPE
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                mode: str = "train") -> Tensor:
    """Channel-wise batch normalization over an NCHW tensor.

    Train mode normalizes with batch statistics (eps 1e-5) and updates the
    running stats in place (momentum 0.1, unbiased running variance); eval
    mode normalizes with the running stats.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d input must be 4-d, got {x.ndim}-d")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise DimensionError(f"{name} axis 0 = {t.shape}, expected ({c},) to match channel axis 1")
    if running.mean.shape != (c,) or running.var.shape != (c,):
        raise DimensionError(f"running stats length {running.mean.shape[0]} != channel count {c}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")

    axes = (0, 2, 3)
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + _BN_EPS)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running.mean[:] = (1 - _BN_MOMENTUM) * running.mean + _BN_MOMENTUM * mu
        running.var[:] = (1 - _BN_MOMENTUM) * running.var + _BN_MOMENTUM * unbiased
    else:
        inv = 1.0 / np.sqrt(running.var + _BN_EPS)
        xhat = (x.data - running.mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gw = gamma.data[None, :, None, None]
            if mode == "eval":
                _accum(x, g * gw * inv[None, :, None, None])
            else:
                m = x.shape[0] * x.shape[2] * x.shape[3]
                dxhat = g * gw
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                _accum(x, (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2))

    return _from_op(out, (x, gamma, beta), bw, "batchnorm2d")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map `x @ weight + bias` for a single vector or a batch of rows."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2:
        raise DimensionError(f"dense weight must be 2-d, got {weight.ndim}-d")
    n_in, n_out = weight.shape
    if x.shape[-1] != n_in:
        raise DimensionError(
            f"dense input axis {x.ndim - 1} = {x.shape[-1]}, weight axis 0 = {n_in}"
        )
    if bias.shape != (n_out,):
        raise DimensionError(f"bias axis 0 = {bias.shape}, expected ({n_out},)")
    single = x.ndim == 1
    xd = x.data[None, :] if single else x.data
    if xd.ndim != 2:
        raise DimensionError(f"dense input must be 1-d or 2-d, got {x.ndim}-d")
    out = xd @ weight.data + bias.data
    if single:
        out = out[0]

    def bw(g):
        g2 = g[None, :] if single else g
        if weight.requires_grad:
            _accum(weight, xd.T @ g2)
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            dx = g2 @ weight.data.T
            _accum(x, dx[0] if single else dx)

    return _from_op(out, (x, weight, bias), bw, "dense")


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Windowed max over an NCHW tensor; gradient routes to the argmax.

    Ties within a window resolve to the first element in row-major order.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d input must be 4-d, got {x.ndim}-d")
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, window, stride, 0), _conv_out(w, window, stride, 0)
    if ho < 1 or wo < 1:
        raise DimensionError(f"no valid pooling position: input {h}x{w}, window {window}, stride {stride}")
    cols = np.empty((n, c, ho, wo, window * window), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            cols[:, :, :, :, i * window + j] = x.data[
                :, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride
            ]
    arg = cols.argmax(axis=-1)
    out = np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        if not x.requires_grad:
            return
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=False)
        rows = hi * stride + arg // window
        colp = wi * stride + arg % window
        dx = np.zeros_like(x.data)
        np.add.at(dx, (ni, ci, rows, colp), g)
        _accum(x, dx)

    return _from_op(out, (x,), bw, "maxpool2d")


def adaptive_maxpool2d(x: Tensor, out_h: int = 2, out_w: int = 2) -> Tensor:
    """Max-pool to a fixed output grid with per-cell windows.

    Cell (i, j) covers rows floor(i*h/out_h) .. ceil((i+1)*h/out_h); when the
    input is smaller than the grid, windows overlap and values repeat. Ties
    resolve to the first element in row-major order inside the cell.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"adaptive_maxpool2d input must be 4-d, got {x.ndim}-d")
    n, c, h, w = x.shape
    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    regions = []
    for i in range(out_h):
        hs, he = (i * h) // out_h, -(-((i + 1) * h) // out_h)
        for j in range(out_w):
            ws, we = (j * w) // out_w, -(-((j + 1) * w) // out_w)
            block = x.data[:, :, hs:he, ws:we].reshape(n, c, -1)
            arg = block.argmax(axis=-1)
            out[:, :, i, j] = np.take_along_axis(block, arg[..., None], axis=-1)[..., 0]
            regions.append((i, j, hs, ws, we - ws, arg))

    def bw(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        ni, ci = np.indices((n, c), sparse=False)
        for i, j, hs, ws, width, arg in regions:
            rows = hs + arg // width
            colp = ws + arg % width
            np.add.at(dx, (ni, ci, rows, colp), g[:, :, i, j])
        _accum(x, dx)

    return _from_op(out, (x,), bw, "adaptive_maxpool2d")


def softmax_with_temperature(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature-scaled softmax over the last axis, max-subtracted for stability."""
    logits = _as_tensor(logits)
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    z = (logits.data - logits.data.max(axis=-1, keepdims=True)) / temperature
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if logits.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            _accum(logits, out * (g - dot) / temperature)

    return _from_op(out, (logits,), bw, "softmax_t")


def log_softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """log(softmax(logits / T)) over the last axis, numerically stable."""
    logits = _as_tensor(logits)
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    z = logits.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        if logits.requires_grad:
            soft = np.exp(out)
            _accum(logits, (g - soft * g.sum(axis=-1, keepdims=True)) / temperature)

    return _from_op(out, (logits,), bw, "log_softmax")


def take_channels(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather channels along axis 1; indices must be strictly ascending."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("take_channels needs a channel axis (axis 1)")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or (idx.size > 1 and not np.all(np.diff(idx) > 0)):
        raise ParameterError("channel indices must be strictly ascending")
    if idx.size and (idx[0] < 0 or idx[-1] >= x.shape[1]):
        raise DimensionError(
            f"channel index out of range: axis 1 has {x.shape[1]} channels, requested {int(idx[-1])}"
        )
    out = np.ascontiguousarray(x.data[:, idx])

    def bw(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[:, idx] = g
            _accum(x, dx)

    return _from_op(out, (x,), bw, "take_channels")


def pick_classes(x: Tensor, labels: np.ndarray) -> Tensor:
    """Select x[i, labels[i]] for each row; used by the cross-entropy loss."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"pick_classes input must be 2-d, got {x.ndim}-d")
    lab = np.asarray(labels, dtype=np.intp)
    if lab.shape != (x.shape[0],):
        raise DimensionError(f"labels axis 0 = {lab.shape}, expected ({x.shape[0]},)")
    if lab.size and (lab.min() < 0 or lab.max() >= x.shape[1]):
        raise DimensionError(f"label out of range for {x.shape[1]} classes")
    rows = np.arange(x.shape[0])
    out = x.data[rows, lab]

    def bw(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[rows, lab] = g
            _accum(x, dx)

    return _from_op(out, (x,), bw, "pick_classes")


def finite_diff_check(f: Callable[..., Tensor], point, h: float = 1e-3) -> float:
    """Compare analytic gradients of `f` against central differences.

    `point` is one tensor or a sequence of tensors with requires_grad set;
    `f(*point)` must be a scalar. Returns the max over all coordinates of
    |analytic - central| / max(1e-8, |analytic| + |central|).
    """
    pts: list[Tensor] = [point] if isinstance(point, Tensor) else list(point)
    for p in pts:
        p.zero_grad()
    tape = GradTape()
    with tape:
        loss = f(*pts)
    if loss.size != 1:
        raise TapeError("finite_diff_check needs a scalar-valued function")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in pts]

    worst = 0.0
    with no_grad():
        for p, an in zip(pts, analytic):
            flat = p.data.reshape(-1)
            aflat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*pts).data.item()
                flat[i] = orig - h
                fm = f(*pts).data.item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = float(aflat[i])
                worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
