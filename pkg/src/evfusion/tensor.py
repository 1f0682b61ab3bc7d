"""Dense tensors with reverse-mode differentiation.

Only the operations the collision networks need are provided. Every op
accepts an optional leading batch axis, so ``conv2d`` works on ``(C, H, W)``
and ``(N, C, H, W)`` alike.

Arrays are float32 unless a float64 array is passed in explicitly; the
gradient checker relies on that to run the same graph in double precision.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "concat",
    "concat_channels",
    "conv2d",
    "dropout",
    "finite_diff_check",
    "linear",
    "matmul",
    "maxpool2",
    "mse",
    "no_grad",
    "relu",
    "reshape",
    "self_attention",
    "softmax_rows",
    "transpose",
]


class GraphError(RuntimeError):
    """Raised for misuse of the autodiff graph (non-scalar root, double backward)."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, what: str, got, expected=None):
        msg = f"{op}: {what} mismatch, got {got}"
        if expected is not None:
            msg += f", expected {expected}"
        super().__init__(msg)
        self.op = op
        self.dimension = what


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Node:
    """One operation record of the graph."""

    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Register an op defined elsewhere (quantizers use this).

    ``backward_fn(grad)`` must return one gradient (or None) per parent.
    """
    return _make(data, parents, backward_fn, op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# graph traversal


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            if t.node.consumed:
                raise GraphError(
                    "backward already ran through this graph; run a fresh forward pass"
                )
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Leaf gradients accumulate across graphs (call ``zero_grad`` between
    steps); a graph itself can only be traversed once.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        t.grad = g
        node = t.node
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node.consumed = True
        node.backward_fn = None


# --------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = b

        def bw_scalar(g):
            return (g * c,)

        return _make(a.data * np.asarray(c, dtype=a.dtype), (a,), bw_scalar, "scale")
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), bw, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "transpose")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), bw, "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner dimension", a.shape[-1], b.shape[-2])
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two ``(C, H, W)`` maps (optionally batched) along channels."""
    if a.data.ndim != b.data.ndim:
        raise ShapeError("concat_channels", "rank", b.data.ndim, a.data.ndim)
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeError("concat_channels", "spatial size", b.shape[-2:], a.shape[-2:])
    if a.shape[:-3] != b.shape[:-3]:
        raise ShapeError("concat_channels", "batch size", b.shape[:-3], a.shape[:-3])
    return concat([a, b], axis=-3)


# --------------------------------------------------------------------------
# layers


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """(N, C, H+2, W+2) padded input -> (C*9, N*H*W) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((c, 9, n, h, w), dtype=xp.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy * 3 + dx] = xp[:, :, dy : dy + h, dx : dx + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, n * h * w)


def _col2im(cols: np.ndarray, n: int, c: int, h: int, w: int) -> np.ndarray:
    cols = cols.reshape(c, 9, n, h, w)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            xp[:, :, dy : dy + h, dx : dx + w] += cols[:, dy * 3 + dx].transpose(1, 0, 2, 3)
    return xp[:, :, 1:-1, 1:-1]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """3x3, stride-1, zero-padded cross-correlation plus per-channel bias."""
    if padding != 1:
        raise ValueError("conv2d supports padding=1 only")
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError("conv2d", "kernel size", weight.shape, "(Cout, Cin, 3, 3)")
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ShapeError("conv2d", "input rank", x.data.ndim, "3 or 4")
    n, cin, h, w = xd.shape
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError("conv2d", "input channels", cin, weight.shape[1])
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d", "bias length", bias.shape, (cout,))

    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, w)
    wm = weight.data.reshape(cout, cin * 9)
    out = (wm @ cols).reshape(cout, n, h, w).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def bw(g):
        gd = g[None] if unbatched else g
        gm = gd.transpose(1, 0, 2, 3).reshape(cout, n * h * w)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gd.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im(wm.T @ gm, n, cin, h, w)
            if unbatched:
                gx = gx[0]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route gradient to the first element."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError("maxpool2", "spatial size (must be even)", (h, w))
    d = x.data
    # block members in row-major order: top-left, top-right, bottom-left, bottom-right
    parts = (d[..., 0::2, 0::2], d[..., 0::2, 1::2], d[..., 1::2, 0::2], d[..., 1::2, 1::2])
    out = np.maximum(np.maximum(parts[0], parts[1]), np.maximum(parts[2], parts[3]))

    def bw(g):
        gx = np.zeros_like(d)
        taken = np.zeros(out.shape, dtype=bool)
        for (dy, dx), part in zip(((0, 0), (0, 1), (1, 0), (1, 1)), parts):
            hit = (part == out) & ~taken
            taken |= hit
            gx[..., dy::2, dx::2] = g * hit
        return (gx,)

    return _make(out, (x,), bw, "maxpool2")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (..., Din)."""
    if weight.data.ndim != 2:
        raise ShapeError("linear", "weight rank", weight.data.ndim, 2)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", "input features", x.shape[-1], weight.shape[1])
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear", "bias length", bias.shape, (weight.shape[0],))
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g @ weight.data) if x.requires_grad else None
        gw = (g2.T @ x2) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "linear")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head scaled dot-product self-attention over tokens ``x`` (..., N, D)."""
    d = x.shape[-1]
    for name, w in (("Wq", wq), ("Wk", wk), ("Wv", wv)):
        if w.shape != (d, d):
            raise ShapeError("self_attention", f"{name} shape", w.shape, (d, d))
    return attend(matmul(x, wq), matmul(x, wk), matmul(x, wv))


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(D)) v given precomputed projections."""
    d = q.shape[-1]
    kt = transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))
    scores = mul(matmul(q, kt), 1.0 / math.sqrt(d))
    return matmul(softmax_rows(scores), v)


def dropout(x: Tensor, p: float, mode: str = "train", rng: np.random.Generator | int | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def bw(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bw, "dropout")


def mse(pred: Tensor, target) -> Tensor:
    target = _wrap(target)
    if pred.shape != target.shape:
        raise ShapeError("mse", "shape", target.shape, pred.shape)
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = (2.0 / n) * g * diff
        return gp, (-gp if target.requires_grad else None)

    return _make(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred, target), bw, "mse")


# --------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[[], Tensor],
    tensors: Tensor | Iterable[Tensor],
    eps: float = 1e-3,
    n_samples: int = 10,
    rng: np.random.Generator | int | None = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between ``backward`` and central differences.

    ``f`` is re-evaluated with each sampled coordinate shifted by ``±eps``;
    relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if isinstance(tensors, Tensor):
        tensors = [tensors]
    tensors = list(tensors)
    rng = np.random.default_rng(rng)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        k = min(n_samples, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
