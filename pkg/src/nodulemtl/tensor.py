"""Dense tensors with tape-free reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its inputs and a closure mapping the upstream gradient to one gradient per
input.  :func:`backward` orders the recorded nodes topologically and
accumulates gradients into the ``grad`` slot of every leaf that requires
them.  Intermediate gradients live only for the duration of the traversal,
so calling :func:`backward` twice on the same graph adds exactly the same
amount to each leaf again.

Activations use the ``[batch, channel, z, y, x]`` layout throughout.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, DataError, NumericError, ShapeError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them for differentiation."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = ""

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

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
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"{what} contains NaN or Inf")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    # elementwise arithmetic; broadcasting is undone in the backward pass

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.data.dtype)
        a_shape, b_shape = self.shape, other.shape

        def back(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), back, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other, self.data.dtype))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.data.dtype) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.data.dtype)
        a, b = self.data, other.data

        def back(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), back, "mul")

    __rmul__ = __mul__

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise UsageError("only constant exponents are supported")
        a = self.data

        def back(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor._from_op(a**exponent, (self,), back, "pow")

    def sum(self) -> "Tensor":
        shape = self.shape
        return Tensor._from_op(
            np.asarray(self.data.sum()), (self,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
        )

    def mean(self) -> "Tensor":
        shape, n = self.shape, self.data.size
        return Tensor._from_op(
            np.asarray(self.data.mean()), (self,), lambda g: (np.full(shape, g / n, dtype=self.data.dtype),), "mean"
        )

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")


def _as_tensor(value, dtype) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class ComputeGraph:
    """Recorded operations reachable from one output, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate; call :meth:`Tensor.zero_grad` (or the
    optimizer's ``zero_grad``) between steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    graph = graph or ComputeGraph.trace(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# 3D convolution (cross-correlation, 3x3x3 kernel, stride 1)

def _im2col(xp: np.ndarray, buf: np.ndarray | None = None) -> np.ndarray:
    """Columns of one padded sample over its flattened grid.

    ``xp`` is (cin, Zp, Yp, Xp).  Row ``(c, dz, dy, dx)`` of the result holds
    channel ``c`` read at flat offset ``dz*Yp*Xp + dy*Xp + dx``, for the first
    ``Lv = Zp*Yp*Xp - (2*Yp*Xp + 2*Xp + 2)`` grid positions; every valid output
    voxel ``(z, y, x)`` sits at flat index ``z*Yp*Xp + y*Xp + x < Lv``.
    Each row is a contiguous copy, which beats gathering 3-D windows.
    Passing the previous result as ``buf`` reuses its memory.
    """
    cin, zp, yp, xp_ = xp.shape
    plane = yp * xp_
    lv = zp * plane - (2 * plane + 2 * xp_ + 2)
    flat = np.ascontiguousarray(xp).reshape(cin, -1)
    step = flat.strides[1]
    view = as_strided(flat, shape=(cin, 3, 3, 3, lv),
                      strides=(flat.strides[0], plane * step, xp_ * step, step, step))
    if buf is None:
        buf = np.empty((cin * 27, lv), dtype=xp.dtype)
    np.copyto(buf.reshape(cin, 3, 3, 3, lv), view)
    return buf


def _correlate(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of an already padded batch with a 3x3x3 kernel."""
    b, _, zp, yp, xp_ = xp.shape
    cout = w.shape[0]
    wm = w.reshape(cout, -1)
    out = np.empty((b, cout, zp * yp * xp_), dtype=np.result_type(xp, w))
    cols = None
    for i in range(b):
        cols = _im2col(xp[i], cols)
        np.matmul(wm, cols, out=out[i, :, : cols.shape[1]])
    return np.ascontiguousarray(out.reshape(b, cout, zp, yp, xp_)[:, :, : zp - 2, : yp - 2, : xp_ - 2])


def _pad_xyz(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    if padding not in ("same", "valid"):
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")
    if kernel.ndim != 5 or kernel.shape[2:] != (3, 3, 3):
        raise ConfigError(f"conv3d kernel must be [cout, cin, 3, 3, 3], got {kernel.shape}")
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be [b, c, z, y, x], got {x.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernel.shape[0]} output channels")
    pad = 1 if padding == "same" else 0
    if padding == "valid" and min(x.shape[2:]) < 3:
        raise ShapeError(f"valid conv3d needs spatial extents >= 3, got {x.shape[2:]}")

    xp = _pad_xyz(x.data, pad)
    w = kernel.data
    out = _correlate(xp, w)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def back(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _correlate(_pad_xyz(g, 2 - pad), flipped)
        if kernel.requires_grad:
            b, cout = g.shape[:2]
            z, y, x_ = g.shape[2:]
            gpad = np.zeros((b, cout) + xp.shape[2:], dtype=g.dtype)
            gpad[:, :, :z, :y, :x_] = g
            gpad = gpad.reshape(b, cout, -1)
            gw2 = np.zeros((cout, w[0].size), dtype=w.dtype)
            cols = None
            for i in range(b):
                cols = _im2col(xp[i], cols)
                gw2 += gpad[i, :, : cols.shape[1]] @ cols.T
            gw = gw2.reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, parents, back, "conv3d")


# ---------------------------------------------------------------------------
# normalization and activations


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, z, y, x).

    In training mode the batch statistics are used and the running
    statistics are updated in place by an exponential moving average.
    """
    if eps <= 0:
        raise ConfigError("batch_norm eps must be positive")
    if x.ndim != 5:
        raise ShapeError(f"batch_norm input must be [b, c, z, y, x], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    n = x.data.size // c
    xd = x.data
    if training:
        if n < 2:
            raise DataError("batch_norm in training mode needs at least two values per channel")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (inv.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), back, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax expects [batch, classes], got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(s, (x,), back, "softmax")


# ---------------------------------------------------------------------------
# in-plane resampling


def max_pool_xy(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max over (y, x); ties go to the first element."""
    if x.ndim != 5:
        raise ShapeError(f"max_pool_xy input must be [b, c, z, y, x], got {x.shape}")
    b, c, z, y, w = x.shape
    if y % 2 or w % 2:
        raise ShapeError(f"max_pool_xy needs even y and x extents, got y={y}, x={w}")
    win = x.data.reshape(b, c, z, y // 2, 2, w // 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
    win = win.reshape(b, c, z, y // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(b, c, z, y // 2, w // 2, 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
        return (gwin.reshape(b, c, z, y, w),)

    return Tensor._from_op(out, (x,), back, "max_pool_xy")


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) linear map of factor-2 bilinear resampling along one axis.

    Output index o samples input coordinate (o + 0.5) / 2 - 0.5, clamped to
    [0, n - 1] (half-pixel centres, border clamp).
    """
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        s = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n - 1)
        frac = s - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def bilinear_upsample_xy(x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"bilinear_upsample_xy input must be [b, c, z, y, x], got {x.shape}")
    uy = upsample_matrix(x.shape[3], x.data.dtype)
    ux = upsample_matrix(x.shape[4], x.data.dtype)
    out = np.matmul(np.matmul(uy, x.data), ux.T)

    def back(g):
        return (np.matmul(np.matmul(uy.T, g), ux),)

    return Tensor._from_op(out, (x,), back, "bilinear_upsample_xy")


# ---------------------------------------------------------------------------
# dense layers


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"fully_connected expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} does not match weight width {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, back, "fully_connected")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join tensors along ``axis``; every other extent must agree."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    shapes = [t.shape[:axis] + t.shape[axis + 1 :] for t in tensors]
    if any(s != shapes[0] for s in shapes):
        raise ShapeError(f"concat extents differ off axis {axis}: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(out, tuple(tensors), back, "concat")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)
