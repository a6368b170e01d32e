"""Dense array kernel with reverse-mode differentiation.

Everything downstream (backbones, heads, losses) is composed from the
primitives in this module. The op set is deliberately closed: matrix
multiply, elementwise add/multiply, slicing and other zero-cost layout
moves, softmax, layer norm, GELU/ReLU, reductions, L2 normalization and
log. Anything fancier has to be composed from these so that gradient
checking stays tractable.

Tensors wrap numpy arrays in float32 or float64. float64 is the mode
used by tests and oracles, float32 is the training default. Graphs are
built define-by-run: each op returns a fresh `Tensor` holding references
to its parents and a closure that routes the output gradient back to
them. `Tensor.backward` walks the recorded graph once in reverse
topological order.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_DEFAULT_DTYPE = np.dtype(np.float32)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created without an explicit one."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in _ALLOWED_DTYPES:
        raise ValueError(f"unsupported dtype {dt}, expected float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class Tensor:
    """A numpy-backed value in the computation graph.

    `requires_grad` marks leaves that should receive gradients; op
    outputs inherit it from their inputs. After `backward`, `grad` holds
    the accumulated gradient as a plain numpy array of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        if dtype is not None:
            dt = np.dtype(dtype)
        elif isinstance(data, np.ndarray) and data.dtype in _ALLOWED_DTYPES:
            dt = data.dtype
        else:
            dt = _DEFAULT_DTYPE
        if dt not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {dt}, expected float32 or float64")
        self.data = np.asarray(data, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        """The live underlying buffer (not a copy)."""
        return self.data

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- graph machinery -----------------------------------------------------

    def detach(self) -> "Tensor":
        """Same buffer, cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor through the recorded graph."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(Graph.trace(self).nodes):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else add_const(self, -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class Graph:
    """The ops reachable from a root, leaves first in `nodes`."""

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def param(data, dtype=None) -> Tensor:
    """A leaf tensor that participates in optimization."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


# -- helpers ------------------------------------------------------------------


def _check_same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed dtypes in op: {dt.name} vs {t.dtype.name}")
    return dt


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


# -- arithmetic ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def add_const(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g)

    return _make(a.data + a.dtype.type(c), (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)

    def backward(g):
        a._accumulate(g * s)

    return _make(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.ndim} and {b.ndim}")

    def backward(g):
        a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


# -- layout -------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    original = a.shape

    def backward(g):
        a._accumulate(g.reshape(original))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    _check_same_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices). Gradient scatters back into place."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, np.integer, slice)) and k is not Ellipsis:
            raise TypeError(f"slice_ supports basic indexing only, got {type(k).__name__}")

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        a._accumulate(buf)

    return _make(np.ascontiguousarray(a.data[key]), (a,), backward)


def pad2d(a: Tensor, padding: int) -> Tensor:
    """Zero-pad the trailing two axes of a (..., H, W) tensor."""
    if padding < 0:
        raise ValueError("padding must be non-negative")
    if padding == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(padding, padding), (padding, padding)]
    inner = (Ellipsis, slice(padding, -padding), slice(padding, -padding))

    def backward(g):
        a._accumulate(g[inner])

    return _make(np.pad(a.data, width), (a,), backward)


def unfold2d(a: Tensor, kernel: int, stride: int) -> Tensor:
    """Extract kernel x kernel patches from (B, C, H, W) into (B, OH, OW, C*k*k).

    This is the im2col move: a convolution becomes unfold2d followed by a
    matmul with the flattened filter bank.
    """
    if a.ndim != 4:
        raise ValueError(f"unfold2d expects (B, C, H, W), got shape {a.shape}")
    b, c, h, w = a.shape
    if h < kernel or w < kernel:
        raise ValueError(f"kernel {kernel} larger than spatial dims {(h, w)}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1

    windows = np.lib.stride_tricks.sliding_window_view(a.data, (kernel, kernel), axis=(2, 3))
    sub = windows[:, :, ::stride, ::stride, :, :]
    out = np.ascontiguousarray(sub.transpose(0, 2, 3, 1, 4, 5)).reshape(b, oh, ow, c * kernel * kernel)

    def backward(g):
        gp = g.reshape(b, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
        buf = np.zeros_like(a.data)
        for i in range(kernel):
            for j in range(kernel):
                buf[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gp[:, :, :, :, i, j]
        a._accumulate(buf)

    return _make(out, (a,), backward)


# -- nonlinearities -------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _make(np.maximum(a.data, 0), (a,), backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient is zero where the floor binds."""
    mask = a.data > floor

    def backward(g):
        a._accumulate(g * mask)

    return _make(np.maximum(a.data, a.dtype.type(floor)), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return _make(x * cdf, (a,), backward)


def log(a: Tensor) -> Tensor:
    """Natural log. Inputs must be positive; clamp first if unsure."""

    def backward(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        a._accumulate((g - (g * out).sum(axis=-1, keepdims=True)) * out)

    return _make(out, (a,), backward)


def softmax_t(logits: Tensor, tau: float) -> Tensor:
    """Temperature softmax: softmax(logits / tau) over the last axis."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return softmax(scale(logits, 1.0 / tau))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    _check_same_dtype(x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"affine params must have shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std

    def backward(g):
        gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        beta._accumulate(_unbroadcast(g, beta.shape))
        gx = g * gamma.data
        gx = (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) * inv_std
        x._accumulate(gx)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def l2_normalize(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale rows (last axis) to unit L2 norm, with a floor on the norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, a.dtype.type(eps))
    out = a.data / denom
    active = norm > eps

    def backward(g):
        inv = 1.0 / denom
        # Below the floor the denominator is a constant, so only g/eps flows.
        corr = out * (g * out).sum(axis=-1, keepdims=True) * active
        a._accumulate((g - corr) * inv)

    return _make(out, (a,), backward)


# -- reductions -----------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % len(shape) for a in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        a._accumulate(_expand_reduced(g, a.shape, axis, keepdims))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def backward(g):
        a._accumulate(_expand_reduced(g, a.shape, axis, keepdims) / a.dtype.type(count))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# -- composed losses -------------------------------------------------------------


def cross_entropy(p_target: Tensor, p_pred: Tensor, floor: float = 1e-12) -> Tensor:
    """Mean over the batch of -sum_k target_k * log(pred_k).

    Both arguments are probability rows of shape (B, K). The target must
    already be detached; gradients flow into the prediction only.
    Predictions are clamped at `floor` before the log.
    """
    if floor <= 0:
        raise ValueError(f"floor must be positive, got {floor}")
    if p_target.requires_grad:
        raise ValueError("cross_entropy target must be detached")
    if p_target.shape != p_pred.shape:
        raise ValueError(f"shape mismatch: target {p_target.shape} vs pred {p_pred.shape}")
    if p_pred.ndim != 2:
        raise ValueError(f"expected (B, K) probability rows, got shape {p_pred.shape}")
    per_sample = sum_(mul(p_target, log(clamp_min(p_pred, floor))), axis=-1)
    return scale(mean(per_sample), -1.0)
