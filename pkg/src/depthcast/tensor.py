"""Minimal reverse-mode autodiff over rank-4 arrays.

Every tensor is a (batch, channels, height, width) float64 array. Ops build a
parent-pointer graph; ``Tensor.backward`` runs one reverse topological sweep
and accumulates gradients into the ``grad`` field of leaf tensors. The op set
is exactly what the depth/mask networks need: 2d convolution, group
normalization, pointwise nonlinearities, channel concat/slice, nearest
upsampling and a full-sum reduction. ``finite_diff_gradient`` is the
independent oracle all analytic gradients are checked against.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "scalar",
    "zeros",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "exp",
    "sigmoid",
    "tanh",
    "relu",
    "softplus",
    "sum_all",
    "conv2d",
    "group_norm",
    "concat_channels",
    "slice_channels",
    "upsample_nearest",
    "trace",
    "finite_diff_gradient",
]


class ShapeError(ValueError):
    """An operation was given tensors whose shapes do not fit its contract."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Rank-4 float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (B,C,H,W); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph plumbing -----------------------------------------------------
    def detach(self) -> "Tensor":
        """Value-only copy: same data, no history (TBPTT frame boundary)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain: Sequence["Tensor"] = ()) -> None:
        """Reverse sweep from a scalar tensor.

        Gradients accumulate additively into ``grad`` of every reachable leaf
        with ``requires_grad`` (plus any tensors listed in ``retain``).
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = trace(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        retain_ids = {id(t) for t in retain}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf() or id(node) in retain_ids:
                if node.requires_grad or id(node) in retain_ids:
                    node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def trace(root: Tensor) -> list[Tensor]:
    """Ordered record of the ops behind ``root`` (topological, leaves first).

    Each recorded node appears exactly once; ``backward`` visits the list in
    reverse execution order.
    """
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- constructors -----------------------------------------------------------

def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], op: str,
          backward: Callable[[np.ndarray], Iterable[tuple[Tensor, np.ndarray]]]) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(out_data, requires_grad=True, _parents=parents, _op=op)
        out._backward = backward
        return out
    return Tensor(out_data, requires_grad=False, _op=op)


# -- elementwise ops ----------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not align")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(out, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(out, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make(out, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def backward(g):
        return ((a, g * c),)

    return _make(out, (a,), "scale", backward)


def add_const(a: Tensor, c: float) -> Tensor:
    out = a.data + float(c)

    def backward(g):
        return ((a, g),)

    return _make(out, (a,), "add_const", backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return ((a, g * out),)

    return _make(out, (a,), "exp", backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form, stable for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def backward(g):
        return ((a, g * out * (1.0 - out)),)

    return _make(out, (a,), "sigmoid", backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return ((a, g * (1.0 - out * out)),)

    return _make(out, (a,), "tanh", backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return ((a, g * (a.data > 0)),)

    return _make(out, (a,), "relu", backward)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        return ((a, g * _sigmoid(a.data)),)

    return _make(out, (a,), "softplus", backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), a.data.sum())

    def backward(g):
        return ((a, np.broadcast_to(g.reshape(()), a.shape).copy()),)

    return _make(out, (a,), "sum", backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(
                f"concat_channels: non-channel dims differ ({ref} vs {p.shape})")
    out = np.concatenate([p.data for p in parts], axis=1)
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def backward(g):
        return tuple(zip(parts, np.split(g, splits, axis=1)))

    return _make(out, tuple(parts), "concat", backward)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_channels[{start}:{stop}] out of range for {a.shape}")
    out = a.data[:, start:stop].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return ((a, full),)

    return _make(out, (a,), "slice", backward)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    out = np.repeat(np.repeat(a.data, factor, axis=2), factor, axis=3)

    def backward(g):
        B, C, H, W = a.shape
        return ((a, g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5))),)

    return _make(out, (a,), "upsample", backward)


# -- convolution --------------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(B,C,H,W) -> (B*OH*OW, C*k*k) patch matrix."""
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, OH, OW, k, k)
    OH, OW = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * OH * OW, C * k * k)


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch-matrix gradients back onto the input grid."""
    B, C, H, W = x_shape
    OH = _conv_out_size(H, k, stride, pad)
    OW = _conv_out_size(W, k, stride, pad)
    cols = cols.reshape(B, OH, OW, C, k, k).transpose(0, 3, 1, 2, 4, 5)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for p in range(k):
        for q in range(k):
            xp[:, :, p:p + stride * OH:stride, q:q + stride * OW:stride] += cols[:, :, :, :, p, q]
    if pad:
        return xp[:, :, pad:pad + H, pad:pad + W]
    return xp


# patch matrices above this many elements are processed in batch chunks
_COL_ELEM_LIMIT = 1 << 24


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding plus per-channel bias.

    ``kernel`` is (out_ch, in_ch, k, k); ``bias`` is (1, out_ch, 1, 1).
    """
    B, C, H, W = x.shape
    O, CK, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernels are square; got {kh}x{kw}")
    k = kh
    if CK != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {CK}")
    if pad < 0 or stride < 1:
        raise ShapeError("conv2d: pad must be >= 0 and stride >= 1")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {H + 2 * pad}x{W + 2 * pad}")
    if bias is not None and bias.shape != (1, O, 1, 1):
        raise ShapeError(f"conv2d: bias must be (1,{O},1,1), got {bias.shape}")

    OH = _conv_out_size(H, k, stride, pad)
    OW = _conv_out_size(W, k, stride, pad)
    per_item = OH * OW * C * k * k
    chunk = max(1, _COL_ELEM_LIMIT // max(per_item, 1))
    wmat = kernel.data.reshape(O, C * k * k)

    out = np.empty((B, O, OH, OW))
    for lo in range(0, B, chunk):
        xs = x.data[lo:lo + chunk]
        cols = _im2col(xs, k, stride, pad)
        out[lo:lo + chunk] = (cols @ wmat.T).reshape(xs.shape[0], OH, OW, O).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        grads = []
        dx = np.empty_like(x.data) if x.requires_grad else None
        dw = np.zeros((O, C * k * k)) if kernel.requires_grad else None
        # patch matrices are recomputed per chunk rather than cached: they are
        # by far the largest buffers touched by the graph
        for lo in range(0, B, chunk):
            nb = min(chunk, B - lo)
            gmat = g[lo:lo + nb].transpose(0, 2, 3, 1).reshape(nb * OH * OW, O)
            if dx is not None:
                dcols = gmat @ wmat
                dx[lo:lo + nb] = _col2im(dcols, (nb, C, H, W), k, stride, pad)
            if dw is not None:
                dw += gmat.T @ _im2col(x.data[lo:lo + nb], k, stride, pad)
        if dx is not None:
            grads.append((x, dx))
        if dw is not None:
            grads.append((kernel, dw.reshape(O, C, k, k)))
        if bias is not None and bias.requires_grad:
            grads.append((bias, g.sum(axis=(0, 2, 3)).reshape(1, O, 1, 1)))
        return grads

    return _make(out, parents, "conv2d", backward)


# -- group normalization -------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize per (sample, channel group) over channels x spatial extent."""
    B, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {groups} groups")
    if gamma.shape != (1, C, 1, 1) or beta.shape != (1, C, 1, 1):
        raise ShapeError("group_norm: gamma/beta must be (1,C,1,1)")
    if eps <= 0:
        raise ShapeError("group_norm: eps must be positive")

    xg = x.data.reshape(B, groups, C // groups, H, W)
    mean = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mean) * inv_std
    xhat = xhat_g.reshape(B, C, H, W)
    out = xhat * gamma.data + beta.data

    def backward(g):
        grads = []
        if gamma.requires_grad:
            grads.append((gamma, (g * xhat).sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)))
        if beta.requires_grad:
            grads.append((beta, g.sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)))
        if x.requires_grad:
            dxh = (g * gamma.data).reshape(B, groups, C // groups, H, W)
            m1 = dxh.mean(axis=(2, 3, 4), keepdims=True)
            m2 = (dxh * xhat_g).mean(axis=(2, 3, 4), keepdims=True)
            dx = inv_std * (dxh - m1 - xhat_g * m2)
            grads.append((x, dx.reshape(B, C, H, W)))
        return grads

    return _make(out, (x, gamma, beta), "group_norm", backward)


# -- finite-difference oracle ---------------------------------------------------

def finite_diff_gradient(f: Callable[[Tensor], float], x: Tensor,
                         h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f / d x, elementwise.

    ``f`` must be deterministic and return a python float. This is the oracle
    the analytic gradients are validated against; it never touches the graph.
    """
    if h <= 0:
        raise ValueError("finite_diff_gradient: step must be positive")
    base = x.data.copy()
    out = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        pert = base.copy()
        pert[idx] = base[idx] + h
        fp = f(Tensor(pert))
        pert[idx] = base[idx] - h
        fm = f(Tensor(pert))
        out[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return out


def finite_diff_at(f: Callable[[np.ndarray], float], arr: np.ndarray,
                   indices: Iterable[tuple], h: float = 1e-5) -> dict[tuple, float]:
    """Central differences of ``f`` at selected coordinates of ``arr``.

    Cheap variant for whole-model checks where perturbing every coordinate
    would be wasteful; ``f`` receives the full (mutated) array.
    """
    base = arr.copy()
    out = {}
    for idx in indices:
        pert = base.copy()
        pert[idx] = base[idx] + h
        fp = f(pert)
        pert[idx] = base[idx] - h
        fm = f(pert)
        out[idx] = (fp - fm) / (2.0 * h)
    return out
