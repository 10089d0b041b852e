"""Minimal reverse-mode automatic differentiation on top of numpy.

A :class:`Tensor` wraps an ``ndarray`` and, when it was produced by an op on
tracked inputs, a closure mapping the output gradient to input gradients.
:meth:`Tensor.backward` walks the recorded graph in reverse topological order
and accumulates into the ``grad`` buffers of tracked leaves.

Only bias-over-channels broadcasting is supported; every other binary op
requires identical shapes.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float32
_STATE = threading.local()  # graph recording is toggled per thread


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


def get_dtype() -> type:
    return _DTYPE


def set_dtype(dtype) -> None:
    """Select the run-wide precision profile (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    old = is_grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = old


def is_grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)


def topological_order(root: Tensor) -> list[Tensor]:
    """Return tracked nodes reachable from ``root`` with inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),), "scale")


def shift(a: Tensor, s: float) -> Tensor:
    return _make(a.data + a.data.dtype.type(s), (a,), lambda g: (g,), "shift")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
    return _make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = _check_finite("exp", np.exp(a.data))
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean")


def mean_spatial(a: Tensor) -> Tensor:
    """Global average pool NCHW -> NC."""
    n, c, h, w = a.shape
    out = a.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], a.shape).copy(),)

    return _make(out, (a,), back, "mean_spatial")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        other[axis] = ref[axis]
        if other != ref:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), back, "concat")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[:, start:stop].copy()

    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _make(out, (a,), back, "slice_channels")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel (C,) or per-sample-per-channel (N, C) bias to NCHW."""
    n, c = x.shape[:2]
    if b.shape == (c,):
        bb = b.data[None, :, None, None]
        reduce_axes = (0, 2, 3)
    elif b.shape == (n, c):
        bb = b.data[:, :, None, None]
        reduce_axes = (2, 3)
    else:
        raise ShapeError(f"add_channel_bias: bias {b.shape} does not match input {x.shape}")
    return _make(x.data + bb, (x, b), lambda g: (g, g.sum(axis=reduce_axes)), "add_channel_bias")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (N, D) @ w (D, O) + b (O)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        grads = (g @ w.data.T, x.data.T @ g)
        return grads + ((g.sum(axis=0),) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "linear")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize NCHW over (channels in group, H, W), then scale and shift per channel."""
    n, c, h, w = x.shape
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: {c} channels, {groups} groups, affine {gamma.shape}/{beta.shape}")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(x.shape), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(out, (x, gamma, beta), back, "group_norm")


# ---------------------------------------------------------------- resampling

def down2(a: Tensor) -> Tensor:
    """2x2 average pooling."""
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"down2 needs even spatial extents, got {a.shape}")
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * g.dtype.type(0.25),)

    return _make(out, (a,), back, "down2")


def up2_nearest(a: Tensor) -> Tensor:
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (a,), back, "up2_nearest")


def resample(a: Tensor, mode: str) -> Tensor:
    if mode == "down2":
        return down2(a)
    if mode == "up2_nearest":
        return up2_nearest(a)
    raise ValueError(f"unknown resample mode {mode!r}")


# ---------------------------------------------------------------- convolution

def _correlate(xp: np.ndarray, w: np.ndarray, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation of padded NCHW ``xp`` with OIKK ``w``.

    Returns the NCHW output and the im2col matrix (rows ordered n, h, w).
    """
    n, c = xp.shape[:2]
    o, _, k, _ = w.shape
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(o, c * k * k).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def _conv_shift(x: Tensor, w: Tensor, b: Tensor | None, padding: int) -> Tensor:
    """Stride-1 convolution as k*k GEMMs over shifted views of the flattened padded grid.

    Outputs are computed on the full padded grid (C, N*Hp*Wp) and cropped, so
    no im2col copy is needed.
    """
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho, wo = hp - k + 1, wp - k + 1
    L = n * hp * wp
    extra = (k - 1) * wp + (k - 1)
    buf = np.zeros((c, L + extra), dtype=x.data.dtype)
    buf[:, :L].reshape(c, n, hp, wp)[:, :, padding : padding + h, padding : padding + wd] = x.data.transpose(1, 0, 2, 3)
    taps = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1))  # k, k, o, c
    offsets = [(i, j, i * wp + j) for i in range(k) for j in range(k)]
    full = np.zeros((o, L), dtype=x.data.dtype)
    for i, j, off in offsets:
        full += taps[i, j] @ buf[:, off : off + L]
    out = full.reshape(o, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gw = gb = gx = None
        gfull = np.zeros((o, n, hp, wp), dtype=g.dtype)
        gfull[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gfull = gfull.reshape(o, L)
        if w.requires_grad:
            gw = np.empty((k, k, o, c), dtype=g.dtype)
            for i, j, off in offsets:
                gw[i, j] = gfull @ buf[:, off : off + L].T
            gw = np.ascontiguousarray(gw.transpose(2, 3, 0, 1))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gbuf = np.zeros((c, L + extra), dtype=g.dtype)
            taps_t = np.ascontiguousarray(taps.transpose(0, 1, 3, 2))
            for i, j, off in offsets:
                gbuf[:, off : off + L] += taps_t[i, j] @ gfull
            gx = gbuf[:, :L].reshape(c, n, hp, wp)[:, :, padding : padding + h, padding : padding + wd]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        return (gx, gw) + ((gb,) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "conv2d")


def _conv_im2col(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int) -> Tensor:
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + hs : stride, j : j + ws : stride] += dcols[..., i, j]
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + wd])
        return (gx, gw) + ((gb,) if b is not None else ())

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "conv2d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, OIKK weight, zero padding.

    Output size per axis is floor((H + 2 padding - K) / stride) + 1.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match weight {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    k = w.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    if stride == 1:
        return _conv_shift(x, w, b, padding)
    return _conv_im2col(x, w, b, stride, padding)


# ---------------------------------------------------------------- spectral normalization

def spectral_divide(w: Tensor, u: np.ndarray, v: np.ndarray) -> Tensor:
    """Return w / sigma with sigma = u^T W v, W = w reshaped (out, rest).

    ``u`` and ``v`` are constants; the gradient flows through sigma.
    """
    o = w.shape[0]
    wmat = w.data.reshape(o, -1)
    sigma = float(u @ wmat @ v)
    out = w.data / w.data.dtype.type(sigma)
    outer = np.outer(u, v).reshape(w.shape)

    def back(g):
        inner = float(np.sum(g * w.data))
        return (g / sigma - (inner / sigma**2) * outer,)

    return _make(out, (w,), back, "spectral_divide")


def elementwise(op: str, a: Tensor, b: Tensor | float | None = None, slope: float = 0.2) -> Tensor:
    """Dispatch by name: relu, leaky_relu, add, mul, scale, sub."""
    if op == "relu":
        return relu(a)
    if op == "leaky_relu":
        return leaky_relu(a, slope)
    if op == "scale":
        return scale(a, b)
    fn = {"add": add, "mul": mul, "sub": sub}.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fn(a, b)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
