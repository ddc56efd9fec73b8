"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of primitives needed by a small CNN, a projection head and
the contrastive / classification losses are provided.  Every primitive has a
hand-written vector-Jacobian product, and :func:`finite_diff_grad` is kept
deliberately naive so it can serve as an independent oracle for them.

Usage::

    with Tape() as tape:
        y = relu(affine(x, w, b))
        loss = sum_all(y)
    grads = backward(tape, loss)   # {id(w): ..., ...}

Convolutions accept a single image ``(C, H, W)`` or a batch ``(N, C, H, W)``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "conv2d",
    "relu",
    "maxpool2",
    "global_avg_pool",
    "affine",
    "l2_normalize",
    "add",
    "mul",
    "sum_all",
    "square_norm",
    "reshape",
    "custom_op",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An ndarray plus a flag saying whether gradients should flow to it."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of primitive applications.

    A tape records only while it is the innermost active context on the
    current thread.  Recording order is a valid topological order, so the
    backward sweep simply walks the list in reverse.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor, wrt: Iterable[Tensor] | None = None):
        return backward(self, loss, wrt)


def _tracked(*xs: Tensor) -> bool:
    return any(x.requires_grad for x in xs)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    tape = _active_tape()
    needs = _tracked(*inputs)
    result = Tensor(out, requires_grad=needs)
    if needs and tape is not None:
        tape.record(_Node(op, inputs, result, vjp))
    return result


def custom_op(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Record an externally defined primitive.

    ``vjp(g)`` receives the upstream gradient (same shape as ``out``) and must
    return one gradient (or ``None``) per input.
    """
    return _emit(op, tuple(inputs), out, vjp)


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None):
    """Reverse sweep over ``tape`` starting at the scalar ``loss``.

    Returns a dict ``{id(tensor): grad}``.  When ``wrt`` is given, every
    tensor listed there gets an entry, zero-filled if the loss does not
    depend on it.  Gradients reaching a tensor along several paths are summed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if wrt is None:
        return grads
    out = {}
    for t in wrt:
        g = grads.get(id(t))
        out[id(t)] = np.zeros_like(t.data) if g is None else g.reshape(t.shape)
    return out


# -- convolution -----------------------------------------------------------


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H', W', k, k) strided view
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding (no bias; add one with :func:`add`)."""
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    w = kernel.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (N,)C,H,W input and 4-d kernel, got {x.shape} and {kernel.shape}")
    n, c_in, h, wid = xd.shape
    c_out, kc, kh, kw = w.shape
    if kc != c_in or kh != kw:
        raise ShapeError(f"kernel {kernel.shape} incompatible with input channels {c_in}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    k = kh
    if k > h + 2 * pad or k > wid + 2 * pad:
        raise ShapeError(f"kernel size {k} exceeds padded input {h + 2 * pad}x{wid + 2 * pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _windows(xp, k, stride)
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def vjp(g):
        g4 = g[None] if single else g
        gw = np.tensordot(g4, cols, axes=([0, 2, 3], [0, 2, 3]))  # (C_out, C_in, k, k)
        gcols = np.tensordot(g4, w, axes=([1], [0]))  # (N, H', W', C_in, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + h, pad : pad + wid] if pad else gxp
        return (gx[0] if single else gx), gw

    return _emit("conv2d", (x, kernel), out[0] if single else out, vjp)


# -- elementwise / pooling -------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.maximum(x.data, 0), lambda g: (g * mask,))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, over the last two axes.

    Odd trailing rows/columns are dropped.  Ties route the gradient to the
    first maximal element in row-major window order.
    """
    d = x.data
    h, w = d.shape[-2:]
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2 needs spatial extent >= 2, got {h}x{w}")
    lead = d.shape[:-2]
    trimmed = d[..., : 2 * h2, : 2 * w2]
    blocks = trimmed.reshape(*lead, h2, 2, w2, 2).swapaxes(-3, -2).reshape(*lead, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gt = gb.reshape(*lead, h2, w2, 2, 2).swapaxes(-3, -2).reshape(*lead, 2 * h2, 2 * w2)
        gx = np.zeros(d.shape, dtype=g.dtype)
        gx[..., : 2 * h2, : 2 * w2] = gt
        return (gx,)

    return _emit("maxpool2", (x,), out, vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the last two (spatial) axes."""
    d = x.data
    h, w = d.shape[-2:]

    def vjp(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), d.shape).copy(),)

    return _emit("global_avg_pool", (x,), d.mean(axis=(-2, -1)), vjp)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (d_in,) or (n, d_in)."""
    xd, w, b = x.data, weight.data, bias.data
    if w.ndim != 2 or xd.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"affine: x {x.shape}, W {weight.shape}, b {bias.shape}")
    out = xd @ w.T + b

    def vjp(g):
        x2 = xd.reshape(-1, xd.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return (g @ w, g2.T @ x2, g2.sum(axis=0))

    return _emit("affine", (x, weight, bias), out, vjp)


def l2_normalize(v: Tensor) -> Tensor:
    """Scale the last axis to unit Euclidean length."""
    d = v.data
    norm = np.sqrt((d * d).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero vector has no direction")
    u = d / norm

    def vjp(g):
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / norm,)

    return _emit("l2_normalize", (v,), u, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data
    return _emit(
        "mul", (a, b), out, lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))
    )


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, g, dtype=x.dtype),))


def square_norm(x: Tensor) -> Tensor:
    d = x.data
    return _emit("square_norm", (x,), np.asarray((d * d).sum()), lambda g: (2.0 * g * d,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


# -- oracle ----------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one element at a time."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
